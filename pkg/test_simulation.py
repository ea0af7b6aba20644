"""
Tests for time grids, the Brownian ensemble and the forward Euler scheme.
"""

import logging
import math

import numpy as np
import pytest

from fbsde.exceptions import NonFiniteStateError
from fbsde.models import builtin_problem, load_problem_config
from fbsde.services.oracle import delay_oracle
from fbsde.services.simulation import (
    PathEnsemble,
    TimeGrid,
    dump_trajectories,
    forward_euler,
    make_grid,
    sample_brownian,
    zero_source,
)
from fbsde.utils.reporting import read_csv

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def test_make_grid():
    grid = make_grid(1.0, 4)
    np.testing.assert_allclose(grid.times, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert grid.K == 4 and grid.T == 1.0 and grid.t0 == 0.0
    shifted = make_grid(0.7, 3, t0=0.4)
    assert shifted.t0 == 0.4 and shifted.T == 0.7
    assert shifted.horizon == pytest.approx(0.3)
    with pytest.raises(ValueError):
        make_grid(1.0, 0)
    with pytest.raises(ValueError):
        make_grid(0.5, 2, t0=0.5)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid.from_times([0.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        TimeGrid.from_times([0.0])
    with pytest.raises(ValueError):
        TimeGrid.from_times([0.0, math.nan])
    grid = TimeGrid.from_times([0.0, 0.1, 0.5])
    with pytest.raises(ValueError):
        grid.times[0] = 1.0


def test_time_grid_concat():
    glued = TimeGrid.concat([make_grid(0.5, 2), make_grid(1.0, 5, t0=0.5)])
    assert glued.K == 7
    assert glued.index_of(0.5) == 2
    with pytest.raises(ValueError):
        TimeGrid.concat([make_grid(0.5, 2), make_grid(1.0, 2, t0=0.6)])
    with pytest.raises(ValueError):
        glued.index_of(0.55)


def test_brownian_is_reproducible():
    grid = make_grid(1.0, 10)
    a = sample_brownian(grid, 50, 2, seed=7)
    b = sample_brownian(grid, 50, 2, seed=7)
    c = sample_brownian(grid, 50, 2, seed=8)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_brownian_prefix_independent_of_path_count():
    grid = make_grid(1.0, 6)
    small = sample_brownian(grid, 10, 1, seed=3)
    large = sample_brownian(grid, 1200, 1, seed=3)
    np.testing.assert_array_equal(small, large[:10])


def test_brownian_independent_of_thread_count():
    grid = make_grid(1.0, 5)
    single = sample_brownian(grid, 3000, 2, seed=11, num_threads=1)
    pooled = sample_brownian(grid, 3000, 2, seed=11, num_threads=4)
    np.testing.assert_array_equal(single, pooled)


def test_brownian_moments():
    grid = make_grid(1.0, 10)
    n = 20_000
    dW = sample_brownian(grid, n, 1, seed=1)
    dt = 0.1
    mean = dW.mean(axis=0)[:, 0]
    var = dW.var(axis=0)[:, 0]
    assert np.all(np.abs(mean) <= 5.0 * math.sqrt(dt / n))
    assert np.all(np.abs(var - dt) <= 5.0 * dt * math.sqrt(2.0 / n))


def test_brownian_nonuniform_steps():
    grid = TimeGrid.from_times([0.0, 0.01, 0.5, 1.5])
    dW = sample_brownian(grid, 40_000, 1, seed=2)
    var = dW.var(axis=0)[:, 0]
    np.testing.assert_allclose(var, grid.steps, rtol=5.0 * math.sqrt(2.0 / 40_000))


def test_brownian_argument_errors():
    grid = make_grid(1.0, 2)
    with pytest.raises(ValueError):
        sample_brownian(grid, 10, 1, seed=-1)
    with pytest.raises(ValueError):
        sample_brownian(grid, 0, 1, seed=0)


def test_forward_euler_counterexample_matches_ode():
    k, T, x0 = 1.0, 1.0, 1.0
    K = 10_000
    p = builtin_problem("delay_counterexample", {"k": k, "T": T, "x0": x0})
    oracle = delay_oracle(k, T, x0, 0.0)
    grid = make_grid(T, K)
    dW = sample_brownian(grid, 1, 1, seed=0)

    def y_source(step, x):
        return np.full((x.shape[0], 1), oracle.value(grid.times[step]))

    X = forward_euler(p, grid, dW, y_source)
    beta = x0 * math.tan(math.sqrt(k) * T)
    exact = x0 * math.cos(math.sqrt(k) * T) + beta * math.sin(math.sqrt(k) * T)
    assert abs(X[0, -1, 0] - exact) <= 10.0 * (T / K) * (abs(x0) + abs(beta))


def test_forward_euler_start_states_and_brownian_part():
    p = builtin_problem("martingale", {"T": 1.0, "x0": 2.0})
    grid = make_grid(1.0, 8)
    dW = sample_brownian(grid, 5, 1, seed=4)
    X = forward_euler(p, grid, dW, zero_source(1))
    np.testing.assert_allclose(X[:, -1, 0], 2.0 + dW.sum(axis=1)[:, 0], atol=1e-12)
    starts = np.arange(5.0).reshape(5, 1)
    X2 = forward_euler(p, grid, dW, zero_source(1), x_start=starts)
    np.testing.assert_allclose(X2[:, 0, :], starts)


def test_forward_euler_reports_non_finite_path():
    p = builtin_problem("delay_counterexample", {"k": 1.0, "T": 1.0, "x0": 1.0})
    grid = make_grid(1.0, 4)
    dW = np.zeros((6, 4, 1))

    def y_source(step, x):
        y = np.zeros((x.shape[0], 1))
        if step == 2:
            y[3] = np.inf
        return y

    with pytest.raises(NonFiniteStateError) as info:
        forward_euler(p, grid, dW, y_source)
    assert info.value.path == 3
    assert info.value.step == 3


def test_forward_euler_shape_errors():
    p = builtin_problem("martingale")
    grid = make_grid(1.0, 4)
    with pytest.raises(ValueError):
        forward_euler(p, grid, np.zeros((2, 3, 1)), zero_source(1))
    with pytest.raises(ValueError):
        forward_euler(p, grid, np.zeros((2, 4, 2)), zero_source(1))


def test_trajectory_dump(tmp_path):
    p = builtin_problem("martingale")
    grid = make_grid(1.0, 3)
    dW = sample_brownian(grid, 4, 1, seed=9)
    ens = PathEnsemble(n_paths=4, grid=grid, dW=dW, seed=9)
    ens.X = forward_euler(p, grid, dW, zero_source(1))
    ens.Y = ens.X.copy()
    ens.Z = np.ones((4, 3, 1, 1))
    path = dump_trajectories(ens, tmp_path / "trajectories.csv", paths=[1, 2])
    frame = read_csv(path)
    assert list(frame.columns) == ["path", "k", "t", "X1", "Y1", "Z11"]
    assert len(frame) == 2 * 4
    assert frame["Z11"].isna().sum() == 2
    np.testing.assert_array_equal(frame["X1"].to_numpy(), ens.X[[1, 2], :, 0].reshape(-1))


def test_brownian_components_are_independent_streams():
    grid = make_grid(1.0, 12)
    one = sample_brownian(grid, 50, 1, seed=9)
    three = sample_brownian(grid, 50, 3, seed=9)
    np.testing.assert_array_equal(one[:, :, 0], three[:, :, 0])
    assert not np.allclose(three[:, :, 1], three[:, :, 0])


def test_brownian_early_steps_do_not_depend_on_later_steps():
    short = sample_brownian(make_grid(1.0, 10), 40, 2, seed=3)
    long = sample_brownian(make_grid(2.0, 20), 40, 2, seed=3)
    np.testing.assert_allclose(long[:, :10], short, rtol=1e-12, atol=0.0)


def test_forward_euler_first_order():
    # dX = -X dt + dW driven through a y-source returning -x
    p = load_problem_config({
        "name": "ou",
        "horizon": 1.0,
        "x0": [1.0],
        "coefficients": {"b": "y", "sigma": "1.0", "g": "0*y", "h": "x"},
        "constants": {"k2": 1.0, "lambda2": 1.0, "k5": 1.0},
    })

    def y_source(k, x):
        return -x

    fine_K, n_paths = 2048, 4000
    fine_dW = sample_brownian(make_grid(1.0, fine_K), n_paths, 1, seed=17)
    reference = forward_euler(p, make_grid(1.0, fine_K), fine_dW, y_source)[:, -1, 0]
    errors = []
    for K in (16, 32, 64):
        coarse_dW = fine_dW.reshape(n_paths, K, fine_K // K, 1).sum(axis=2)
        X = forward_euler(p, make_grid(1.0, K), coarse_dW, y_source)
        errors.append(float(np.mean(np.abs(X[:, -1, 0] - reference))))
    logger.info(f"Euler errors: {errors}")
    assert errors[0] / errors[1] >= 1.8
    assert errors[1] / errors[2] >= 1.8
