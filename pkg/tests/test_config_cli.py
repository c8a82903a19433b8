import csv
import io
import json
import time
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from effdyn.cli import main
from effdyn.config import ConfigError, ExperimentConfig, load_config, loads_config, parse_config, resolve_seed

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return p


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def read_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    assert rows, "empty CSV"
    assert len({len(r) for r in rows}) == 1, "ragged CSV"
    return rows


SMALL = {
    "system": {"name": "case2-linear", "params": {"delta": 0.5}},
    "integrator": {"dt": 0.01, "n_steps": 20, "n_replicas": 8, "thinning": 5},
    "grid": {"lo": [-5.0], "hi": [5.0], "num": [21]},
    "estimation": {"method": "quadrature", "n_samples": 2000},
    "horizon": 0.2,
    "seed": 5,
}


# -- configuration ------------------------------------------------------------------------------------

def test_defaults_and_round_trip():
    cfg = parse_config({"system": {"name": "radial2d"}})
    assert cfg.integrator.dt == 1e-3 and cfg.seed == 0 and cfg.sweep is None
    full = parse_config({**SMALL, "sweep": {"parameter": "delta", "values": [0.2, 0.1, 0.05]}})
    again = loads_config(full.dumps())
    assert again == full
    assert again.digest() == full.digest()


@given(st.floats(1e-5, 1.0), st.integers(1, 50), st.integers(0, 2**31),
       st.lists(st.floats(0.01, 10.0), min_size=1, max_size=5, unique=True))
def test_round_trip_property(dt, reps, seed, values):
    values = sorted(values)
    cfg = parse_config({"system": {"name": "case1-linear", "params": {"eps": 0.1}},
                        "integrator": {"dt": dt, "n_replicas": reps}, "seed": seed,
                        "sweep": {"parameter": "eps", "values": values}})
    assert loads_config(cfg.dumps()) == cfg


@pytest.mark.parametrize("patch,path", [
    ({"integrator": {"n_steps": -1}}, "integrator.n_steps"),
    ({"system": {"name": "nope"}}, "system.name"),
    ({"sweep": {"parameter": "eps", "values": []}}, "sweep.values"),
    ({"sweep": {"parameter": "eps", "values": [0.1, 0.2, 0.15]}}, "sweep.values"),
    ({"grid": {"lo": [1.0], "hi": [0.0], "num": [5]}}, "grid.hi[0]"),
    ({"estimation": {"method": "magic"}}, "estimation.method"),
    ({"colour": "blue"}, "colour"),
])
def test_invalid_configs_name_the_field(patch, path):
    with pytest.raises(ConfigError) as info:
        parse_config({**SMALL, **patch})
    assert info.value.path == path


def test_diagnostics_carry_line_numbers():
    text = '{\n  "system": {"name": "ou2d"},\n  "integrator": {\n    "n_steps": -4\n  }\n}\n'
    with pytest.raises(ConfigError) as info:
        loads_config(text)
    assert info.value.line == 4
    assert "line 4" in str(info.value) and "integrator.n_steps" in str(info.value)
    with pytest.raises(ConfigError) as info:
        loads_config('{\n  "system": {"name": "ou2d"},\n  oops\n}')
    assert info.value.line == 3


def test_seed_precedence():
    cfg = parse_config({**SMALL, "seed": 1})
    assert resolve_seed(cfg, None, {}).seed == 1
    assert resolve_seed(cfg, 2, {}).seed == 2
    assert resolve_seed(cfg, 2, {"EFFDYN_SEED": "3"}).seed == 3
    with pytest.raises(ConfigError):
        resolve_seed(cfg, None, {"EFFDYN_SEED": "x"})


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.json")):
        assert isinstance(load_config(p), ExperimentConfig)


# -- CLI ----------------------------------------------------------------------------------------------------

def test_empty_sweep_exits_with_code_2(tmp_path):
    p = write(tmp_path, {**SMALL, "sweep": {"parameter": "delta", "values": []}})
    code, _, err = run(["scaling", "-c", p])
    assert code == 2
    assert "sweep.values" in err and "line" in err


def test_missing_config_file_exits_with_code_2(tmp_path):
    assert run(["simulate", "-c", tmp_path / "absent.json"])[0] == 2


def test_runtime_failure_names_the_stage(tmp_path):
    p = write(tmp_path, {**SMALL, "system": {"name": "radial2d"}, "grid": {"lo": [-1.0], "hi": [1.0], "num": [5]}})
    code, _, err = run(["cosim", "-c", p])
    assert code == 1
    assert "stage 'model'" in err


def test_seed_flag_and_environment(tmp_path, monkeypatch):
    p = write(tmp_path, SMALL)
    monkeypatch.delenv("EFFDYN_SEED", raising=False)
    base = run(["simulate", "-c", p])[1]
    assert run(["simulate", "-c", p, "--seed", "5"])[1] == base
    flagged = run(["simulate", "-c", p, "--seed", "6"])[1]
    assert flagged != base
    monkeypatch.setenv("EFFDYN_SEED", "6")
    assert run(["simulate", "-c", p, "--seed", "5"])[1] == flagged


def test_simulate_csv(tmp_path):
    pattern = str(tmp_path / "traj" / "r{replica}.csv")
    p = write(tmp_path, {**SMALL, "output": {"trajectory_pattern": pattern}})
    code, out, _ = run(["simulate", "-c", p])
    assert code == 0
    rows = read_csv(out)
    assert rows[0] == ["t", "mean_xi1"] and len(rows) == 6
    assert len(list((tmp_path / "traj").glob("r*.csv"))) == 8
    read_csv((tmp_path / "traj" / "r3.csv").read_text())


def test_coefficients_writes_model(tmp_path):
    p = write(tmp_path, SMALL)
    code, out, _ = run(["coefficients", "-c", p, "-o", tmp_path / "m"])
    assert code == 0
    rows = read_csv((tmp_path / "m" / "model.csv").read_text())
    assert rows[0] == ["z1", "b1", "sigma11", "Q", "count"] and len(rows) == 22
    assert (tmp_path / "m" / "model.effdyn").exists()


def test_cosim_csv(tmp_path):
    p = write(tmp_path, SMALL)
    code, out, _ = run(["cosim", "-c", p, "--records", "4"])
    rows = read_csv(out)
    assert code == 0
    assert rows[0] == ["t", "mean_sq_sup", "se_sup", "marginal_mse", "se_marginal", "excursions"]
    assert len(rows) == 6
    code, out2, _ = run(["cosim", "-c", p, "--records", "4", "--uncoupled"])
    assert code == 0 and out2 != out


def test_scaling_csv_and_fit(tmp_path):
    p = write(tmp_path, {**SMALL, "sweep": {"parameter": "delta", "values": [0.5, 0.25, 0.125]}})
    code, out, err = run(["scaling", "-c", p])
    assert code == 0
    rows = read_csv(out)
    assert rows[0][:4] == ["parameter", "value", "t", "mean_sq_sup"] and len(rows) == 4
    fit = json.loads(err.strip().splitlines()[-1])
    assert fit["case"] == "case2" and fit["n_points"] == 3 and "slope" in fit


def test_frobenius_exit_codes(tmp_path):
    code, out, _ = run(["frobenius", "-c", CONFIGS / "twisted_frobenius.json"])
    assert code == 1
    rows = read_csv(out)
    assert rows[0] == ["x1", "x2", "x3", "residual"] and len(rows) == 201
    p = write(tmp_path, {"system": {"name": "radial2d-aniso"}, "frobenius": {"n_points": 20}})
    code, out, _ = run(["frobenius", "-c", p])
    assert code == 0
    assert all(float(r[-1]) <= 1e-8 for r in read_csv(out)[1:])


def test_bounds_from_supplied_params(tmp_path):
    p = write(tmp_path, {**SMALL, "bounds": {"kind": "thm1", "times": [1.0],
                                             "params": {"kappa1": 1.0, "kappa2": 0.0, "rho": 1.0}}})
    code, out, _ = run(["bounds", "-c", p])
    rows = read_csv(out)
    assert code == 0 and rows[0] == ["t", "bound"]
    assert float(rows[1][1]) == pytest.approx(40.5 * 2.718281828459045, rel=1e-12)
    bad = write(tmp_path, {**SMALL, "bounds": {"params": {"kappa1": 1.0, "kappa2": 0.0, "rho": -1.0}}}, "bad.json")
    assert run(["bounds", "-c", bad])[0] == 2


def test_bounds_with_estimated_params(tmp_path):
    p = write(tmp_path, {**SMALL, "bounds": {"kind": "diss_contractive", "times": [1.0, 5.0]}})
    code, out, _ = run(["bounds", "-c", p])
    rows = read_csv(out)
    assert code == 0 and len(rows) == 3
    assert 0 < float(rows[1][1]) < float(rows[2][1])


# -- pipeline ---------------------------------------------------------------------------------------------

def test_radial_smoke_pipeline_is_fast_accurate_and_reproducible(tmp_path):
    start = time.perf_counter()
    code, out, err = run(["pipeline", "-c", CONFIGS / "radial_smoke.json", "-o", tmp_path / "a"])
    elapsed = time.perf_counter() - start
    assert code == 0, err
    assert elapsed < 60
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["cosim"]["mean_sq_sup"] <= 0.01
    assert summary["cosim"]["n_replicas"] == 200 and summary["cosim"]["dt"] == 1e-3
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"config_sha256", "seed", "versions", "wall_clock_seconds", "outputs"} <= manifest.keys()
    for name in ("model.csv", "cosim.csv", "bounds.csv"):
        read_csv((tmp_path / "a" / name).read_text())

    assert run(["pipeline", "-c", CONFIGS / "radial_smoke.json", "-o", tmp_path / "b"])[0] == 0
    again = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert again["outputs"] == manifest["outputs"]
    assert again["config_sha256"] == manifest["config_sha256"]
