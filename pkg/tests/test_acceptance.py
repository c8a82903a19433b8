"""Acceptance criteria 1-13, each run at its stated tolerance.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured value.
"""

import math

import numpy as np
import pytest
from conftest import record_acceptance
from scipy.stats import linregress

from effdyn.bounds import BoundParams, bound, gronwall_bound, minimize_dissipative
from effdyn.config import parse_config
from effdyn.coupled import coupled_noise_increment, cosimulate, marginal_mse_experiment
from effdyn.effective import (
    ZGrid,
    estimate_kappas,
    estimate_rho,
    estimate_rho_grid,
    fluctuation_moment,
    frobenius_split,
    quadrature_oracle,
)
from effdyn.experiments import estimate_bound_params, run_case_experiment
from effdyn.geometry import frobenius_obstruction, level_set_frame
from effdyn.model import SystemSpec
from effdyn.sampler import IntegratorConfig, em_step, replica_rng
from effdyn.systems import SYSTEMS, make_system
from oracles import linear_case_error

SWEEP = [0.2, 0.1, 0.05, 0.02]
LINEAR_GRID = {"lo": [-6.0], "hi": [6.0], "num": [121]}


def report(number, title, passed, detail):
    record_acceptance(number, title, passed, detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    assert passed, detail


def case_config(name, parameter, values, fixed=None, dt=1.0, replicas=500, fast_fraction=0.02, seed=11):
    integ = {"dt": dt, "n_replicas": replicas}
    if fast_fraction is not None:
        integ["fast_fraction"] = fast_fraction
    return parse_config({
        "system": {"name": name, "params": dict(fixed or {})},
        "integrator": integ,
        "grid": LINEAR_GRID,
        "estimation": {"method": "quadrature"},
        "sweep": {"parameter": parameter, "values": list(values)},
        "horizon": 1.0,
        "seed": seed,
    })


def sweep_detail(res):
    pts = ", ".join(f"{v:g}:{e:.3e}" for v, e in res.points())
    flags = [r["status"] for r in res.rows if r["status"] != "ok"]
    extra = f"; non-ok points {flags}" if flags else ""
    return f"slope {res.fit.slope:.3f} +- {res.fit.stderr:.3f} [{pts}]{extra}"


def within(fit, lo, hi):
    return fit is not None and lo <= fit.slope <= hi


_cache = {}


def case1_stated():
    if "case1" not in _cache:
        cfg = case_config("case1-linear", "eps", SWEEP, {"K": 1.0}, dt=1e-4, fast_fraction=None)
        _cache["case1"] = run_case_experiment("case1", cfg)
    return _cache["case1"]


def case2_stated():
    if "case2" not in _cache:
        # dt = fast_fraction / rho = delta / 50 on this system
        cfg = case_config("case2-linear", "delta", SWEEP, replicas=4000)
        _cache["case2"] = run_case_experiment("case2", cfg)
    return _cache["case2"]


# -- scaling ---------------------------------------------------------------------------------------

def test_criterion_01_case1_scaling():
    res = case1_stated()
    assert all(r["dt"] == 1e-4 for r in res.rows)
    report(1, "case1 slope in [1.7, 2.3]", within(res.fit, 1.7, 2.3), sweep_detail(res))


def test_criterion_02_case2_scaling():
    res = case2_stated()
    assert all(r["dt"] <= r["value"] / 50 * (1 + 1e-12) for r in res.rows)
    report(2, "case2 slope in [0.7, 1.3]", within(res.fit, 0.7, 1.3), sweep_detail(res))


def test_criterion_03_case3_scaling():
    eps_sweep = run_case_experiment("case3", case_config("case3-linear", "eps", SWEEP, {"delta": 0.1}))
    delta_sweep = run_case_experiment("case3", case_config("case3-linear", "delta", SWEEP, {"eps": 0.1}))
    ok = within(eps_sweep.fit, 1.7, 2.3) and within(delta_sweep.fit, 0.7, 1.3)
    detail = f"eps: {sweep_detail(eps_sweep)}; delta: {sweep_detail(delta_sweep)}"
    report(3, "case3 slopes in [1.7, 2.3] (eps) and [0.7, 1.3] (delta)", ok, detail)


def test_scaling_trend_toward_asymptotic_exponents():
    """Supplementary to criteria 1 and 2: the exact marginal error of the
    linear cases approaches the limiting exponents only for smaller
    parameters, and the measured case1 slope grows when the window shifts."""
    def slope(xs, fn):
        return linregress(np.log(xs), np.log([fn(x) for x in xs])).slope

    small = [0.02, 0.01, 0.005, 0.002]
    s1 = (slope(SWEEP, lambda e: linear_case_error(1.0 / e)[0]), slope(small, lambda e: linear_case_error(1.0 / e)[0]))
    s2 = (slope(SWEEP, lambda d: linear_case_error(0.0, 1.0 / d)[0]),
          slope(small, lambda d: linear_case_error(0.0, 1.0 / d)[0]))
    assert s1[0] == pytest.approx(1.7803, abs=1e-3) and s1[1] > 1.95
    assert s2[0] == pytest.approx(0.8623, abs=1e-3) and s2[1] > 0.98
    shifted = run_case_experiment(
        "case1", case_config("case1-linear", "eps", [0.1, 0.05, 0.02, 0.01], {"K": 1.0}, dt=1e-4, fast_fraction=None))
    print(f"case1 shifted window: {sweep_detail(shifted)}; stated window: {sweep_detail(case1_stated())}")
    assert shifted.fit.slope > case1_stated().fit.slope


# -- bounds on the toy system -------------------------------------------------------------------------------

def toy_config():
    return parse_config({
        "system": {"name": "case2-linear", "params": {"delta": 1.0}},
        "grid": {"lo": [-5.0], "hi": [5.0], "num": [41]},
        "estimation": {"method": "quadrature", "n_samples": 50000},
        "seed": 13,
    })


def test_criterion_04_bound_domination():
    cfg = toy_config()
    system = make_system("case2-linear", delta=1.0)
    model = quadrature_oracle(system, ZGrid.uniform([-5.0], [5.0], [41]))
    params, _ = estimate_bound_params(system, model, cfg)
    ic = IntegratorConfig(1e-3, 1000, 2000, seed=13)
    rep = cosimulate(system.spec, model, ic, system.sample_equilibrium, record_steps=[0, 250, 500, 1000])
    rows, ok = [], True
    for t in (0.25, 0.5, 1.0):
        m, se = rep.at(t)
        b = bound("thm1", params, t)
        ok &= m <= b + 3 * se
        rows.append(f"t={t}: {m:.3e} <= {b:.3e}")
    detail = "; ".join(rows) + f" (kappa1={params.kappa1:.3f}, rho={params.rho:.3f}, L_b={params.L_b:.3f})"
    report(4, "measured sup-error below thm1 bound", ok, detail)


def test_criterion_05_fluctuation_moment_saturation():
    system = make_system("case2-linear", delta=1.0)
    model = quadrature_oracle(system, ZGrid.uniform([-6.0], [6.0], [121]))
    x = system.sample_equilibrium(replica_rng(5, 0, 7), 200_000)
    phi2, se = fluctuation_moment(system.spec, model, x)
    kap = estimate_kappas(system.spec, x[:50_000])
    rho = estimate_rho(system.spec, np.array([0.0]), system.chart)
    rhs = kap.kappa1_sq / (system.spec.beta * rho)
    rel = abs(phi2 - rhs) / rhs
    detail = f"E|phi|^2 = {phi2:.4f} +- {se:.4f}, kappa1^2/(beta rho) = {rhs:.4f}, rel diff {rel:.2%}"
    report(5, "fluctuation moment equals its Poincare bound within 5%", rel <= 0.05, detail)


def test_criterion_06_frobenius_identity_suite():
    system = make_system("radial2d-aniso")
    spec = system.spec
    grid = ZGrid.uniform([0.05], [3.0], [60])
    model = quadrature_oracle(system, grid)
    x = system.sample_equilibrium(replica_rng(6, 0, 7), 200_000)
    split = frobenius_split(spec, model, x)
    kap = estimate_kappas(spec, x[:20_000])
    rho, _ = estimate_rho_grid(spec, grid, system.chart)
    identity = abs(split.identity_gap) <= 3 * split.identity_se
    sandwich = split.within <= split.total <= 2 * split.within
    upper = split.total <= 2 * kap.kappa2_sq / (spec.beta * rho)
    detail = (f"total {split.total:.4e}, within {split.within:.4e}, between {split.between:.4e}, "
              f"gap {split.identity_gap:.1e} +- {split.identity_se:.1e}; "
              f"2 kappa2^2/(beta rho) = {2 * kap.kappa2_sq / (spec.beta * rho):.4e}")
    report(6, "Frobenius identity, sandwich and upper bound", identity and sandwich and upper, detail)


def test_criterion_07_spectral_gap_scaling():
    worst = 0.0
    for K in (0.5, 1.0, 2.0):
        for eps in (0.5, 0.1, 0.02):
            system = make_system("case1-linear", eps=eps, K=K, coupling=0.0)
            rho = estimate_rho(system.spec, np.array([0.3]), system.chart)
            worst = max(worst, abs(rho / (K / eps) - 1.0))
    report(7, "fiber spectral gap equals K/eps within 2%", worst <= 0.02, f"max rel error {worst:.2e} on 3x3 grid")


def test_criterion_08_exact_coefficient_null():
    system = make_system("radial2d")
    model = quadrature_oracle(system, ZGrid.uniform([0.05], [3.0], [60]))
    errs, ok = [], True
    for dt in (1e-3, 5e-4):
        n = round(1.0 / dt)
        rep = cosimulate(system.spec, model, IntegratorConfig(dt, n, 500, seed=8, thinning=n), system.sample_equilibrium)
        errs.append(rep.mean_sq_sup[-1])
        ok &= errs[-1] <= 10 * dt and not rep.unreliable
    ok &= errs[1] < errs[0]
    report(8, "radial sup-error below 10 dt and decreasing", ok,
           f"dt=1e-3: {errs[0]:.3e}, dt=5e-4: {errs[1]:.3e}")


# -- geometry --------------------------------------------------------------------------------------------

def test_criterion_09_frobenius_checker():
    rng = np.random.default_rng(9)
    worst_m1 = 0.0
    for name in sorted(SYSTEMS):
        system = make_system(name)
        if system.spec.m == 1:
            x = system.sample_equilibrium(rng, 200)
            worst_m1 = max(worst_m1, float(frobenius_obstruction(system.spec, x).residual.max()))
    polar = SystemSpec(n=3, m=2, beta=1.0, potential=lambda x: np.sum(x**2, axis=-1),
                       xi=lambda x: np.stack([np.hypot(x[..., 0], x[..., 1]), np.arctan2(x[..., 1], x[..., 0])], -1),
                       mobility=lambda x: np.eye(3))
    xp = rng.uniform(0.5, 2.0, (200, 3)) * rng.choice([-1, 1], (200, 3))
    worst_polar = float(frobenius_obstruction(polar, xp).residual.max())
    twisted = make_system("twisted3d")
    least_twisted = float(frobenius_obstruction(twisted.spec, rng.uniform(-2, 2, (200, 3))).residual.min())
    ok = worst_m1 <= 1e-8 and worst_polar <= 1e-8 and least_twisted > 0.1
    report(9, "Frobenius residual separates integrable from twisted", ok,
           f"m=1 max {worst_m1:.1e}, polar max {worst_polar:.1e}, twisted min {least_twisted:.3f}")


def test_criterion_10_projector_identities():
    worst = {"idempotent": 0.0, "annihilates": 0.0, "self-adjoint": 0.0, "root": 0.0}
    for name in sorted(SYSTEMS):
        system = make_system(name)
        spec = system.spec
        x = system.sample_equilibrium(replica_rng(10, 0, 7), 1000)
        f = level_set_frame(spec, x)
        Pi, J, a, A, Phi = f.Pi, f.grad_xi, spec.a(x), f.A, f.phi_mat
        nrm = lambda M: np.linalg.norm(M, axis=(-2, -1))
        JT = np.swapaxes(J, -1, -2)
        PiT = np.swapaxes(Pi, -1, -2)
        errs = {
            "idempotent": nrm(Pi @ Pi - Pi) / nrm(Pi),
            "annihilates": nrm(Pi @ JT) / (nrm(Pi) * nrm(J)),
            "self-adjoint": nrm(PiT @ a - a @ Pi) / (nrm(Pi) * nrm(a)),
            "root": nrm(A @ A - Phi) / nrm(Phi),
        }
        for k, v in errs.items():
            worst[k] = max(worst[k], float(v.max()))
    ok = max(worst.values()) <= 1e-10
    report(10, "projector and square-root identities within 1e-10", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over {len(SYSTEMS)} systems x 1000 points")


def test_criterion_11_levy_characterization():
    dt, N = 1e-3, 100_000
    t = N * dt
    details, ok = [], True
    for name in ("radial2d-aniso", "twisted3d"):
        system = make_system(name)
        spec = system.spec
        rng = replica_rng(11, 0, 0)
        x = system.sample_equilibrium(rng, 1)[0]
        dW = rng.standard_normal((N, spec.noise_dim)) * math.sqrt(dt)
        path = np.empty((N, spec.n))
        for k in range(N):
            path[k] = x
            x = em_step(spec, x, dW[k], dt)
        dw = coupled_noise_increment(spec, path, dW)
        qv = dw.T @ dw
        m = spec.m
        se = dt * np.sqrt(N * (1.0 + np.eye(m)))
        z = np.abs(qv - t * np.eye(m)) / se
        ok &= bool(np.all(z <= 3.0))
        details.append(f"{name}: max |QV - tI|/se = {z.max():.2f}")
    report(11, "quadratic covariation of the driving noise is I t", ok, "; ".join(details) + f" (t={t:g})")


# -- dissipative regime and evaluators -------------------------------------------------------------------

def test_criterion_12_dissipative_saturation():
    cfg = toy_config()
    system = make_system("case2-linear", delta=1.0)
    model = quadrature_oracle(system, ZGrid.uniform([-6.0], [6.0], [121]))
    params, _ = estimate_bound_params(system, model, cfg)
    ic = IntegratorConfig(5e-3, 2000, 4000, seed=12)
    times = [1.0, 2.5, 5.0, 10.0]
    series = marginal_mse_experiment(system.spec, model, ic, system.sample_equilibrium, t_grid=times)
    mse = dict(zip(series.t.tolist(), series.mse))
    saturates = mse[5.0] >= 0.95 * mse[10.0]
    below, rows = True, []
    for t, v, se in zip(series.t, series.mse, series.se):
        b = minimize_dissipative("diss_contractive", params, float(t))[0]
        below &= v <= b + 3 * se
        rows.append(f"t={t:g}: {v:.4f} <= {b:.4f}")
    detail = f"MSE(5)/MSE(10) = {mse[5.0] / mse[10.0]:.3f}; " + "; ".join(rows) + f" (L_d={params.L_d:.3f})"
    report(12, "marginal error saturates below the contractive bound", saturates and below, detail)


def test_criterion_13_bound_evaluators():
    unit = BoundParams(kappa1=1.0, kappa2=0.0, rho=1.0)
    diss = BoundParams(kappa1=1.0, kappa2=0.0, rho=1.0, L_d=1.0)
    zero = BoundParams(kappa1=0.0, kappa2=0.0, rho=1.0, L_d=1.0)
    checks = {
        "thm1 = 40.5 e": (bound("thm1", unit, 1.0), 40.5 * math.e),
        "prop1 = 3 e": (bound("prop1", unit, 1.0), 3.0 * math.e),
        "contractive limit = 1": (bound("diss_contractive", diss, 1e6, v1=1.0, v2=1.0), 1.0),
        "gronwall monotone = e^2": (gronwall_bound(np.ones(11), 0.5, 0.5, 1.0).monotone, math.e**2),
        "gronwall integral, zero coefficients = 5": (gronwall_bound(np.full(11, 5.0), 0.0, 0.0, 1.0).integral, 5.0),
    }
    rel = {k: abs(v - ref) / abs(ref) for k, (v, ref) in checks.items()}
    zeros = [bound(k, zero, 1.0, **e) for k, e in (
        ("prop1", {}), ("thm1", {}), ("thm2_density", {"chi2": 1.0}),
        ("thm2_fixed", {"t0": 0.5, "t1": 0.5, "p_t0_sq": 1.0}), ("diss_contractive", {"v1": 1.0, "v2": 1.0}))]
    ok = max(rel.values()) <= 1e-12 and all(v == 0.0 for v in zeros)
    report(13, "bound evaluators match hand arithmetic to 1e-12", ok,
           f"max rel error {max(rel.values()):.1e}; zero-fluctuation kinds all 0: {all(v == 0.0 for v in zeros)}")
