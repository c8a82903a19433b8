import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from effdyn.effective import (
    BinAccumulator,
    EffectiveModel,
    ZGrid,
    check_sigma_identity,
    estimate_dissipativity,
    estimate_effective,
    estimate_kappas,
    estimate_lipschitz,
    estimate_rho,
    estimate_rho_grid,
    fluctuation_moment,
    multilinear,
    quadrature_oracle,
)
from effdyn.errors import EstimationError, InputError, UnsupportedGeometryError
from effdyn.sampler import IntegratorConfig, replica_rng
from effdyn.systems import make_system


def draws(system, n, seed=0):
    return system.sample_equilibrium(replica_rng(seed, 0, 7), n)


def tabulated(grid, b, sigma=1.0):
    m = grid.m
    nodes = grid.nodes()
    phi = np.broadcast_to(np.eye(m) * sigma**2, grid.shape + (m, m)).copy()
    return EffectiveModel(grid=grid, b_tilde=b(nodes), phi_mean=phi)


# -- grid and interpolation ------------------------------------------------------------

def test_grid_cells_partition_the_range():
    g = ZGrid.uniform([-1.0, 0.0], [1.0, 2.0], [5, 3])
    assert g.shape == (5, 3) and g.size == 15
    assert g.cell_volumes().sum() == pytest.approx((2.5) * (3.0))
    assert g.interior_mask().sum() == 3
    assert g.locate(np.array([[0.0, 1.0], [5.0, 1.0]])).tolist() == [2 * 3 + 1, -1]


def test_grid_rejects_non_increasing_axes():
    with pytest.raises(InputError):
        ZGrid((np.array([0.0, 0.0, 1.0]),))


@given(st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-2.5, 2.5), min_size=2, max_size=2))
def test_multilinear_is_exact_on_affine_functions(c0, c1, z):
    g = ZGrid.uniform([-2.0, -1.0], [2.0, 1.5], [7, 4])
    f = lambda p: c0 + c1 * p[..., 0] - 0.5 * p[..., 1]
    vals, outside = multilinear(g, f(g.nodes()), np.array(z))
    clamped = np.clip(z, [-2.0, -1.0], [2.0, 1.5])
    assert vals == pytest.approx(f(clamped), abs=1e-12)
    assert bool(outside) == (not np.allclose(clamped, z))


def test_model_io_round_trip(tmp_path):
    system = make_system("radial2d-aniso")
    model = quadrature_oracle(system, ZGrid.uniform([0.5], [1.5], [6]))
    path = model.save(tmp_path / "m.effdyn")
    assert path.read_text().splitlines()[0] == "effdyn-model v1"
    back = EffectiveModel.load(path)
    for name in ("b_tilde", "phi_mean", "Q", "a_mean", "counts", "missing"):
        assert np.array_equal(getattr(back, name), getattr(model, name))
    assert np.allclose(back.sigma_nodes, model.sigma_nodes, rtol=1e-15)
    rows = list(csv.reader(model.write_csv(tmp_path / "m.csv").open()))
    assert rows[0] == ["z1", "b1", "sigma11", "Q", "count"]
    assert len(rows) == 7 and len({len(r) for r in rows}) == 1


def test_model_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.effdyn"
    p.write_text("something else\n{}\n")
    with pytest.raises(InputError):
        EffectiveModel.load(p)


# -- quadrature oracle ---------------------------------------------------------------------

def test_oracle_marginal_is_standard_normal_for_toy():
    system = make_system("case2-linear", delta=1.0)
    model = quadrature_oracle(system, ZGrid.uniform([-3.0], [3.0], [25]))
    z = model.grid.axes[0]
    assert np.max(np.abs(model.Q - stats.norm.pdf(z))) <= 1e-8
    assert np.allclose(model.b_tilde[:, 0], -z, atol=1e-8)
    assert np.allclose(model.sigma_nodes[:, 0, 0], 1.0, atol=1e-12)


def test_oracle_radial_marginal_and_sigma():
    system = make_system("radial2d", k=10.0, r0=1.0)
    model = quadrature_oracle(system, ZGrid.uniform([0.2], [2.0], [19]))
    r = model.grid.axes[0]
    dens = lambda s: s * np.exp(-5.0 * (s - 1.0) ** 2)
    from scipy.integrate import quad

    norm = quad(dens, 0, np.inf)[0]
    assert np.allclose(model.Q, dens(r) / norm, rtol=1e-8)
    assert np.allclose(model.sigma_nodes[:, 0, 0], 1.0, atol=1e-12)
    assert np.allclose(model.b_tilde[:, 0], -10.0 * (r - 1.0) + 1.0 / r, rtol=1e-8)


@pytest.mark.parametrize("eps,coupling", [(0.1, 1.0), (0.5, 2.0)])
def test_oracle_linear_drift_matches_gaussian_conditional_mean(eps, coupling):
    system = make_system("case1-linear", eps=eps, coupling=coupling)
    model = quadrature_oracle(system, ZGrid.uniform([-2.0], [2.0], [9]))
    z = model.grid.axes[0]
    stiff = 1.0 / eps
    lam = 1.0 + coupling - coupling**2 / (coupling + stiff)
    assert np.allclose(model.b_tilde[:, 0], -lam * z, atol=1e-8)


def test_oracle_rejects_grid_outside_support_and_missing_chart():
    with pytest.raises(InputError):
        quadrature_oracle(make_system("radial2d"), ZGrid.uniform([-0.5], [1.0], [4]))
    with pytest.raises(UnsupportedGeometryError):
        quadrature_oracle(make_system("twisted3d"), ZGrid.uniform([-1, -1], [1, 1], [3, 3]))


def test_oracle_mass_is_normalised():
    model = quadrature_oracle(make_system("case1-linear", eps=0.2), ZGrid.uniform([-6.0], [6.0], [121]))
    assert 0.98 <= model.Q_mass() <= 1.02


# -- binned and fiber estimators -------------------------------------------------------------

def test_fiber_estimator_on_toy():
    system = make_system("case2-linear", delta=1.0)
    grid = ZGrid.uniform([-2.0], [2.0], [9])
    cfg = IntegratorConfig(dt=0.02, n_steps=5000, n_replicas=100, seed=3, burn_in_steps=100)
    model = estimate_effective(system.spec, grid, "fiber", config=cfg, x0=system.start_on_fiber)
    assert model.counts.min() >= 100_000
    z = grid.axes[0]
    assert np.max(np.abs(model.b_tilde[:, 0] + z)) <= 0.05
    assert np.max(np.abs(model.sigma_nodes[:, 0, 0] - 1.0)) <= 0.05


def test_binned_estimator_on_radial():
    system = make_system("radial2d")
    # hard bins of width h carry an O(h^2) bias that grows in the sparse tail
    grid = ZGrid.uniform([0.5], [1.5], [21])
    model = estimate_effective(system.spec, grid, "binned", samples=draws(system, 200_000))
    r = grid.axes[0]
    valid = ~model.missing
    assert np.max(np.abs(model.b_tilde[valid, 0] - (-10.0 * (r[valid] - 1.0) + 1.0 / r[valid]))) <= 0.05
    assert np.allclose(model.sigma_nodes[valid, 0, 0], 1.0, atol=1e-12)
    inside = 1.0 - model.meta["outside"] / model.meta["total"]
    assert model.Q_mass() == pytest.approx(inside, rel=1e-12)


def test_separable_potential_binned_and_fiber_agree():
    system = make_system("case1-linear", eps=0.5, coupling=0.0)
    grid = ZGrid.uniform([-2.0], [2.0], [81])
    binned = estimate_effective(system.spec, grid, "binned", samples=draws(system, 200_000, seed=4))
    fine = ZGrid.uniform([-2.0], [2.0], [9])
    cfg = IntegratorConfig(dt=0.01, n_steps=200, n_replicas=4, seed=2)
    fiber = estimate_effective(system.spec, fine, "fiber", config=cfg, x0=system.start_on_fiber)
    assert np.allclose(fiber.b_tilde[:, 0], -fine.axes[0], atol=1e-12)
    pick = np.searchsorted(grid.axes[0], fine.axes[0] - 1e-9)
    se = np.hypot(binned.b_se[pick, 0], fiber.b_se[:, 0])
    assert np.all(np.abs(binned.b_tilde[pick, 0] - fiber.b_tilde[:, 0]) <= 3 * se)


@pytest.mark.parametrize("name,params,lo,hi", [
    ("case1-linear", {"eps": 0.2}, -2.0, 2.0),
    ("case2-linear", {"delta": 0.1}, -2.0, 2.0),
    ("radial2d-aniso", {}, 0.6, 1.4),
])
def test_binned_estimator_converges_to_oracle(name, params, lo, hi):
    system = make_system(name, **params)
    grid = ZGrid.uniform([lo], [hi], [17])
    oracle = quadrature_oracle(system, grid)
    binned = estimate_effective(system.spec, grid, "binned", samples=draws(system, 300_000, seed=9))
    tol = np.maximum(0.05, 4 * binned.b_se[..., 0])
    assert np.all(np.abs(binned.b_tilde[..., 0] - oracle.b_tilde[..., 0]) <= tol)
    assert np.all(np.abs(binned.sigma_nodes - oracle.sigma_nodes) <= 0.05)
    check_sigma_identity(binned)


def test_fiber_estimator_converges_to_oracle_for_nonconstant_A():
    system = make_system("radial2d-aniso")
    grid = ZGrid.uniform([0.7], [1.3], [4])
    oracle = quadrature_oracle(system, grid)
    cfg = IntegratorConfig(dt=2e-3, n_steps=3000, n_replicas=20, seed=5, burn_in_steps=200)
    fiber = estimate_effective(system.spec, grid, "fiber", config=cfg, x0=system.start_on_fiber)
    tol = np.maximum(0.05, 4 * fiber.b_se[..., 0])
    assert np.all(np.abs(fiber.b_tilde[..., 0] - oracle.b_tilde[..., 0]) <= tol)
    assert np.all(np.abs(fiber.sigma_nodes - oracle.sigma_nodes) <= 0.05)
    assert np.all(np.abs(fiber.a_mean - oracle.a_mean) <= 0.05)


def test_sigma_is_root_of_mean_phi_not_mean_of_root():
    system = make_system("radial2d-aniso")
    model = quadrature_oracle(system, ZGrid.uniform([0.8], [1.2], [3]))
    assert check_sigma_identity(model) <= 1e-12
    # A varies along each circle, so the two orders of averaging differ
    assert np.all(model.sigma_nodes[:, 0, 0] - model.a_mean[:, 0, 0] > 1e-3)


def test_accumulator_merge_is_order_independent():
    system = make_system("case1-linear", eps=0.3)
    grid = ZGrid.uniform([-2.0], [2.0], [21])
    x = draws(system, 30_000)
    parts = [BinAccumulator(grid).add_states(system.spec, c) for c in np.array_split(x, 3)]
    whole = BinAccumulator(grid).add_states(system.spec, x)
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[2].merge(parts[0].merge(parts[1]))
    for acc in (left, right):
        assert np.array_equal(acc.count, whole.count)
        assert np.allclose(acc.sum_b, whole.sum_b, rtol=1e-12, atol=1e-9)


def test_too_many_empty_bins_is_an_error():
    system = make_system("case1-linear")
    with pytest.raises(EstimationError):
        estimate_effective(system.spec, ZGrid.uniform([-8.0], [8.0], [161]), "binned", samples=draws(system, 200))


def test_unknown_method_is_an_error():
    system = make_system("ou2d")
    with pytest.raises(EstimationError):
        estimate_effective(system.spec, ZGrid.uniform([-1.0], [1.0], [3]), "kernel", samples=np.zeros((3, 2)))


# -- constants ---------------------------------------------------------------------------------------

def test_kappas_vanish_for_radial_system():
    system = make_system("radial2d")
    k = estimate_kappas(system.spec, draws(system, 20_000))
    assert abs(k.kappa1_sq) <= 3 * k.se1_sq + 1e-10
    assert abs(k.kappa2_sq) <= 3 * k.se2_sq + 1e-10
    assert k.rejected == 0


def test_kappa1_of_toy_is_one():
    system = make_system("case2-linear", delta=1.0)
    k = estimate_kappas(system.spec, draws(system, 5_000))
    assert abs(k.kappa1_sq - 1.0) <= max(3 * k.se1_sq, 1e-6)
    assert k.kappa2_sq == pytest.approx(0.0, abs=1e-12)


def test_kappas_vanish_for_separable_potential():
    system = make_system("case1-linear", coupling=0.0)
    k = estimate_kappas(system.spec, draws(system, 2_000))
    assert k.kappa1 == pytest.approx(0.0, abs=1e-6) and k.kappa2 == pytest.approx(0.0, abs=1e-6)


def test_kappas_positive_when_A_varies_on_fibers():
    system = make_system("radial2d-aniso")
    k = estimate_kappas(system.spec, draws(system, 5_000))
    assert k.kappa2_sq > 10 * k.se2_sq


def test_rho_of_toy_fiber():
    system = make_system("case2-linear", delta=1.0)
    assert estimate_rho(system.spec, np.array([0.3]), system.chart) == pytest.approx(1.0, rel=0.02)


def test_rho_requires_one_dimensional_fiber():
    system = make_system("twisted3d")
    with pytest.raises(UnsupportedGeometryError):
        estimate_rho(system.spec, np.zeros(2), system.chart)


@pytest.mark.parametrize("beta", [1.0, 2.0])
def test_rho_dense_and_tridiagonal_agree_across_resolutions(beta):
    system = make_system("case1-linear", eps=0.2, beta=beta)
    z = np.array([0.5])
    coarse = estimate_rho(system.spec, z, system.chart, n_cells=400, dense=True)
    fine = estimate_rho(system.spec, z, system.chart, n_cells=1600)
    assert coarse == pytest.approx(fine, rel=0.01)


def test_rho_scales_with_beta_on_the_circle():
    # pure angular diffusion: the gap of the unit circle is 1/beta
    for beta in (1.0, 2.0):
        system = make_system("radial2d", beta=beta)
        assert estimate_rho(system.spec, np.array([1.0]), system.chart) == pytest.approx(1.0 / beta, rel=1e-3)


def test_rho_grid_minimum():
    system = make_system("radial2d")
    low, vals = estimate_rho_grid(system.spec, ZGrid.uniform([0.5], [2.0], [4]), system.chart)
    assert low == pytest.approx(1.0 / 4.0, rel=1e-3)
    assert vals.shape == (4,)


def test_lipschitz_examples():
    g = ZGrid.uniform([-2.0], [2.0], [81])
    assert estimate_lipschitz(tabulated(g, lambda z: -z)) == pytest.approx((1.0, 0.0), abs=1e-12)
    Lb, Ls = estimate_lipschitz(tabulated(g, lambda z: -z**3))
    # largest secant of z^3 between adjacent nodes: (2^3 - 1.95^3) / 0.05
    assert Lb == pytest.approx(11.7025, rel=1e-12)
    assert Lb <= 12.0
    assert Ls == 0.0


def test_lipschitz_of_sigma():
    g = ZGrid.uniform([0.0], [1.0], [11])
    m = EffectiveModel(grid=g, b_tilde=np.zeros((11, 1)), phi_mean=(1.0 + g.axes[0])[:, None, None] ** 2)
    assert estimate_lipschitz(m)[1] == pytest.approx(1.0, rel=1e-12)


def test_dissipativity_of_linear_drift():
    g = ZGrid.uniform([-2.0], [2.0], [9])
    assert estimate_dissipativity(tabulated(g, lambda z: -1.5 * z)) == pytest.approx(1.5)


def test_fluctuation_bounded_by_poincare_constant():
    for name, params in (("case1-linear", {"eps": 0.3}), ("radial2d-aniso", {})):
        system = make_system(name, **params)
        lo, hi = (-4.0, 4.0) if name.startswith("case") else (0.2, 2.2)
        grid = ZGrid.uniform([lo], [hi], [41])
        model = quadrature_oracle(system, grid)
        x = draws(system, 20_000, seed=1)
        phi2, se_phi = fluctuation_moment(system.spec, model, x)
        k = estimate_kappas(system.spec, x)
        rho, _ = estimate_rho_grid(system.spec, grid, system.chart, n_cells=400)
        beta = system.spec.beta
        assert phi2 <= (k.kappa1_sq + 3 * k.se1_sq) / (beta * rho) + 3 * se_phi
