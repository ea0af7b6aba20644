"""
Tests for the pasting solver, the decoupling field and the Gamma conjugation.
"""

import logging

import numpy as np
import pytest

from fbsde.exceptions import GlobalConditionError, ProblemConfigError, RegressionError
from fbsde.models import builtin_problem, load_problem_config
from fbsde.services.backward import RegressionBasis
from fbsde.services.global_paste import GammaTransform, fit_decoupling, gamma_conjugate, solve_global
from fbsde.services.oracle import pde_oracle
from fbsde.services.picard import CERTIFIED, NOT_COVERED, PicardConfig, solve_local
from fbsde.services.simulation import make_grid
from fbsde.utils.bounds import compute_bounds

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


@pytest.fixture(scope="module")
def pasted_martingale():
    p = builtin_problem("martingale", {"T": 1.0, "x0": 1.0})
    solution = solve_global(p, per_interval_K=5, n_paths=10_000, seed=21, pasting_step=0.4,
                            require_global_conditions=False)
    return p, solution


def test_fit_decoupling_constant_and_linear():
    basis = RegressionBasis("polynomial", degree=2)
    flat = fit_decoupling(np.full((50, 1), 0.3), np.arange(50.0)[:, None], basis)
    np.testing.assert_allclose(flat(np.array([[0.0], [5.0]])), [[24.5], [24.5]])
    assert flat.lipschitz_estimate == 0.0

    x = np.linspace(-2.0, 2.0, 200)[:, None]
    line = fit_decoupling(x, 2.0 * x + 1.0, basis, t=0.5)
    np.testing.assert_allclose(line(np.array([[0.0], [1.5]])), [[1.0], [4.0]], atol=1e-9)
    assert line.lipschitz_estimate == pytest.approx(2.0, rel=1e-6)
    assert line.t == 0.5

    with pytest.raises(RegressionError, match="design spread"):
        fit_decoupling(x[:10], x[:10], basis)


def test_global_conditions_are_checked():
    with pytest.raises(GlobalConditionError):
        solve_global(builtin_problem("martingale"), per_interval_K=5, n_paths=500, seed=0)
    with pytest.raises(GlobalConditionError):
        solve_global(builtin_problem("superquadratic_power"), per_interval_K=5, n_paths=500, seed=0,
                     pasting_step=0.0)


def test_single_interval_matches_local_solve():
    p = builtin_problem("superquadratic_power")
    ens, field_, report = solve_global(p, per_interval_K=5, n_paths=1000, seed=3)
    ens_local, report_local = solve_local(p, make_grid(p.horizon, 5), 1000, 3, PicardConfig(), run_id="interval-1")
    np.testing.assert_array_equal(ens.Y, ens_local.Y)
    np.testing.assert_array_equal(ens.Z, ens_local.Z)
    assert report.certificate == CERTIFIED
    assert report.y0 == report_local.y0
    assert field_.times == [0.0, p.horizon]
    np.testing.assert_allclose(field_.at(0.0)(p.x0[None, :])[0], report.y0)


def test_pasted_martingale(pasted_martingale):
    p, solution = pasted_martingale
    assert solution.report.converged
    assert solution.report.certificate == NOT_COVERED
    assert solution.decoupling.times == pytest.approx([0.0, 0.4, 0.8, 1.0])
    assert len(solution.interval_reports) == 3
    assert all(r.converged for r in solution.interval_reports)
    assert solution.report.y0[0] == pytest.approx(1.0, abs=4e-2)
    assert solution.y0_field[0] == pytest.approx(1.0, abs=4e-2)
    assert len(solution.interface_jumps) == 2
    assert max(solution.interface_jumps) <= 2e-2
    assert solution.ensemble.grid.K == 15
    # θ(t, x) = x for the martingale problem
    theta = solution.decoupling.at(0.4)
    np.testing.assert_allclose(theta(np.array([[0.0], [1.0], [2.0]]))[:, 0], [0.0, 1.0, 2.0], atol=5e-2)
    assert 0.8 <= theta.lipschitz_estimate <= 1.3


def test_field_frames(pasted_martingale):
    _, solution = pasted_martingale
    frame = solution.decoupling.to_frame()
    assert list(frame.columns) == ["time", "kind", "component", "coefficient", "value"]
    assert set(frame["kind"]) == {"constant", "polynomial", "terminal"}
    table = solution.decoupling.table_frame(nodes=11)
    assert list(table.columns) == ["t", "x", "theta1"]
    assert sorted(set(table["t"])) == pytest.approx([0.0, 0.4, 0.8])
    # interior grid points are served by the interval value maps
    t_inner = float(solution.ensemble.grid.times[2])
    values = solution.decoupling.evaluate(t_inner, np.array([[1.0]]))
    assert values[0, 0] == pytest.approx(1.0, abs=5e-2)


def test_gamma_transform():
    G = GammaTransform(np.array([[1.0, 0.5], [0.0, 2.0]]))
    y = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_allclose(G.apply_inverse(G.apply(y)), y, atol=1e-12)
    z = np.random.default_rng(1).normal(size=(20, 2, 3))
    np.testing.assert_allclose(G.apply_inverse_z(G.apply_z(z)), z, atol=1e-12)
    with pytest.raises(ProblemConfigError):
        GammaTransform(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(ProblemConfigError):
        GammaTransform(np.eye(2), GammaInv=2.0 * np.eye(2))
    with pytest.raises(ProblemConfigError):
        gamma_conjugate(builtin_problem("martingale"), G)


def test_identity_conjugation_is_neutral():
    p = builtin_problem("coupled_2d_gamma")
    q = gamma_conjugate(p, GammaTransform(np.eye(2)))
    rng = np.random.default_rng(2)
    x, y, z = rng.normal(size=(9, 1)), rng.normal(size=(9, 2)), rng.normal(size=(9, 2, 1))
    np.testing.assert_allclose(q.g(0.0, x, y, z), p.g(0.0, x, y, z))
    np.testing.assert_allclose(q.b(0.0, x, y), p.b(0.0, x, y))
    np.testing.assert_allclose(q.h(x), p.h(x))
    assert q.constants.k5 == pytest.approx(p.constants.k5)
    assert q.constants.k4 == pytest.approx(p.constants.k4)


def test_scalar_conjugation_of_linear_generator():
    p = builtin_problem("linear_decoupled", {"alpha": 0.5})
    q = gamma_conjugate(p, GammaTransform(np.array([[2.0]])))
    x = np.array([[0.5], [1.0]])
    y = np.array([[1.0], [-2.0]])
    z = np.zeros((2, 1, 1))
    np.testing.assert_allclose(q.g(0.0, x, y, z), 0.5 * y)
    np.testing.assert_allclose(q.h(x), 2.0 * x)
    assert q.constants.k5 == pytest.approx(2.0)
    assert q.constants.k4 == pytest.approx(0.5)
    assert q.name == "linear_decoupled[gamma]"


def test_conjugation_identity_pointwise():
    p = builtin_problem("coupled_2d_gamma")
    G = GammaTransform(np.array(p.source["params"]["gamma"]))
    assert not np.allclose(G.Gamma, np.eye(2))
    q = gamma_conjugate(p, G, g_shape="diagonal")
    rng = np.random.default_rng(10)
    n = 10_000
    x, y, z = rng.normal(size=(n, 1)), 3.0 * rng.normal(size=(n, 2)), 3.0 * rng.normal(size=(n, 2, 1))
    t = 0.1
    np.testing.assert_allclose(G.apply(p.g(t, x, y, z)), q.g(t, x, G.apply(y), G.apply_z(z)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(G.apply(p.h(x)), q.h(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(p.b(t, x, y), q.b(t, x, G.apply(y)), rtol=0, atol=1e-12)
    # after conjugation the generator is diag(a) y + diag(c) z
    a = np.array(p.source["params"]["a"])
    c = np.array(p.source["params"]["c"])
    np.testing.assert_allclose(q.g(t, x, y, z), a * y + c * z[:, :, 0], rtol=0, atol=1e-12)


def test_conjugated_solve_matches_direct():
    p = builtin_problem("coupled_2d_gamma")
    G = GammaTransform(np.array(p.source["params"]["gamma"]))
    q = gamma_conjugate(p, G, g_shape="diagonal")

    rng = np.random.default_rng(4)
    x, y, z = rng.normal(size=(9, 1)), rng.normal(size=(9, 2)), rng.normal(size=(9, 2, 1))
    z_shift = z.copy()
    z_shift[:, 1] += 1.0
    np.testing.assert_allclose(q.g(0.0, x, y, z)[:, 0], q.g(0.0, x, y, z_shift)[:, 0])

    cfg = PicardConfig(enforce_certificate=False, tol=1e-10)
    grid = make_grid(p.horizon, 10)
    ens_p, rep_p = solve_local(p, grid, 4000, 5, cfg)
    ens_q, rep_q = solve_local(q, grid, 4000, 5, cfg)
    assert rep_p.converged and rep_q.converged
    np.testing.assert_allclose(G.apply(np.array([rep_p.y0]))[0], rep_q.y0, atol=1e-3)
    np.testing.assert_allclose(ens_p.X, ens_q.X, atol=1e-3)


def _x_dependent_generator_problem():
    # g = 2x has k3 > 0 and k2 = 0, so C̄ = K5²/k3² exceeds C_loc = k5²/k3²
    return load_problem_config({
        "name": "x-generator",
        "horizon": 0.1,
        "x0": [0.5],
        "g_shape": "diagonal",
        "coefficients": {"b": "0*x", "sigma": "1.0", "g": "2*x", "h": "0.5*sin(x)"},
        "constants": {"k3": 2.0, "k5": 0.5, "lambda2": 1.0, "lambda3": 1.0, "lambda4": 2.0,
                      "lambda5": 0.5, "global_conditions": True},
    })


def test_single_interval_is_certified_against_pasted_horizon():
    p = _x_dependent_generator_problem()
    bounds = compute_bounds(p)
    assert bounds.C_loc == pytest.approx(0.0625)
    assert bounds.C_bar == pytest.approx(0.1225)
    assert bounds.C_loc < p.horizon < bounds.C_bar
    solution = solve_global(p, per_interval_K=5, n_paths=2000, seed=0)
    assert solution.report.certificate == CERTIFIED
    assert solution.report.converged
    assert solution.report.c_loc == pytest.approx(bounds.C_bar)
    assert solution.decoupling.times == pytest.approx([0.0, 0.1])
    # E[0.5 sin(X_T)] + E[∫ 2 X_s ds] for a Brownian X started at 0.5
    expected = 0.5 * np.sin(0.5) * np.exp(-0.05) + 2.0 * 0.5 * 0.1
    assert solution.report.y0[0] == pytest.approx(expected, abs=1.5e-2)


def test_pasted_superquadratic_is_certified():
    p = builtin_problem("superquadratic_power", {"T": 0.3, "x0": 0.5, "amplitude": 0.2})
    bounds = compute_bounds(p)
    assert bounds.C_bar == pytest.approx(bounds.C_loc)
    assert bounds.C_bar < p.horizon
    solution = solve_global(p, per_interval_K=10, n_paths=10_000, seed=8, design_spread=0.6)
    assert solution.report.certificate == CERTIFIED
    assert solution.report.converged
    assert solution.decoupling.times == pytest.approx([0.0, bounds.C_bar, 0.3])
    assert solution.report.z_max <= bounds.M_bar
    assert solution.report.truncation_rate <= 0.01
    reference = float(pde_oracle(p).theta(0.0, p.x0)[0, 0])
    # the generator moves the value well past the tolerance
    driverless = 0.2 * np.sin(0.5) * np.exp(-0.15)
    assert abs(reference - driverless) > 3e-2
    assert solution.report.y0[0] == pytest.approx(reference, abs=8e-3)
    assert max(solution.interface_jumps) <= 2e-2
