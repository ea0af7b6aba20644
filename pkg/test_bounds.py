"""
Tests for the closed-form constants, the Δₙ schedule, the clamps and the pasting grid.
"""

import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, seed, settings, strategies as st
from scipy.optimize import brentq

from fbsde.models import AssumptionConstants, Dimensions, GrowthFn, builtin_problem
from fbsde.utils.bounds import (
    LOG2,
    bsde_intervals,
    bsde_local_horizon,
    compute_bounds,
    contraction_horizon_C2,
    decoupling_lipschitz_K5,
    delta_schedule,
    local_horizon,
    local_horizon_C1,
    malliavin_bound_Q,
    pasting_grid,
    radial_clamp,
    smooth_clamp,
    truncate_generator,
    z_bound_M,
)

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

ONE = Dimensions(1, 1, 1)
ALL_ONES = AssumptionConstants(k1=1.0, k2=1.0, k3=1.0, k4=1.0, k5=1.0, lambda2=1.0)


def test_all_ones_constants():
    assert z_bound_M(ALL_ONES, ONE) == 4.0
    assert local_horizon_C1(ALL_ONES, ONE) == pytest.approx(LOG2 / 3.0, rel=1e-12)


@pytest.mark.parametrize("k5, lambda2, dims, expected", [
    (1.0, 1.0, Dimensions(1, 1, 1), 4.0),
    (0.5, 2.0, Dimensions(1, 1, 1), 4.0),
    (1.0, 1.0, Dimensions(3, 2, 2), 8.0),
    (0.25, 1.0, Dimensions(1, 4, 1), 2.0),
    (0.0, 3.0, Dimensions(2, 2, 2), 0.0),
])
def test_z_bound_M(k5, lambda2, dims, expected):
    c = AssumptionConstants(k5=k5, lambda2=lambda2)
    assert z_bound_M(c, dims) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("A, q, expected", [
    (((1.0,),), ((0.0,),), math.sqrt(2.0)),
    (((0.0,),), ((0.0,),), 0.0),
    (((1.0, 2.0),), ((0.5, 0.5),), math.sqrt(2.0 * 6.0)),
    (((3.0,), (4.0,)), ((0.0,), (0.0,)), math.sqrt(50.0)),
    (((0.0,),), ((2.0,),), 2.0),
])
def test_malliavin_bound_Q(A, q, expected):
    c = AssumptionConstants(A=A, q_integrals=q)
    assert malliavin_bound_Q(c) == pytest.approx(expected, rel=1e-12)


def test_malliavin_shape_mismatch():
    with pytest.raises(ValueError):
        malliavin_bound_Q(AssumptionConstants(A=((1.0, 1.0),), q_integrals=((0.0,),)))


def test_C1_zero_denominators_are_unconstrained():
    c = AssumptionConstants(k5=1.0, lambda2=1.0)
    assert local_horizon_C1(c, ONE) == pytest.approx(LOG2, rel=1e-12)
    counterexample = builtin_problem("delay_counterexample", {"k": 1.0, "T": 1.0, "x0": 1.0})
    assert local_horizon_C1(counterexample.constants, ONE) == 0.0


def test_C2_matches_independent_root_finder():
    T_star = contraction_horizon_C2(ALL_ONES, ONE, c1=4.0)

    def excess(T):
        return 8.0 * 5.0 * math.exp(3.0 * T) * (1.0 + T) * T ** 2 - 0.5

    reference = brentq(excess, 1e-9, 0.5, xtol=1e-15)
    assert T_star == pytest.approx(reference, rel=1e-8)
    assert 0.08 < T_star < 0.1


def test_C2_without_coupling_is_unbounded():
    assert math.isinf(contraction_horizon_C2(AssumptionConstants(k5=1.0), ONE))
    assert contraction_horizon_C2(AssumptionConstants(k1=2.0), ONE) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        contraction_horizon_C2(ALL_ONES, ONE, c1=0.0)


def test_builtin_local_horizons():
    martingale = compute_bounds(builtin_problem("martingale"), n_cap=10)
    assert martingale.C_loc == pytest.approx(LOG2, rel=1e-12)
    linear = compute_bounds(builtin_problem("linear_decoupled", {"alpha": 0.5}), n_cap=10)
    assert linear.C_loc == pytest.approx(LOG2 / 2.0, rel=1e-12)
    superquadratic = compute_bounds(builtin_problem("superquadratic_power"), n_cap=10)
    assert superquadratic.M == pytest.approx(2.0, rel=1e-12)
    assert superquadratic.C_loc == pytest.approx(LOG2 / 26.0, rel=1e-12)
    assert superquadratic.locally_covered


def test_bsde_horizon_is_first_schedule_term():
    rho = GrowthFn("power", 1.0, 2.0)
    schedule, _ = delta_schedule(0.5, rho, 1.5, 100.0, 3)
    assert schedule[0] == pytest.approx(bsde_local_horizon(0.5, rho, 1.5), rel=1e-15)


def test_schedule_linear_growth_stalls():
    schedule, N = delta_schedule(0.0, GrowthFn("monomial", 1.0, 1.0), 1.0, 1.0, 50)
    assert schedule[0] == pytest.approx(LOG2 / 2.0, rel=1e-12)
    assert schedule[1] == pytest.approx(LOG2 / 5.0, rel=1e-12)
    assert schedule[2] == pytest.approx(LOG2 / 17.0, rel=1e-12)
    assert N is None
    assert sum(schedule) < 1.0


def test_schedule_linear_growth_never_reaches_one():
    schedule, N = delta_schedule(0.0, GrowthFn("monomial", 1.0, 1.0), 1.0, 1.0, 1_000_000)
    assert N is None
    assert sum(schedule) < 1.0
    # terms underflow long before the cap
    assert len(schedule) < 2000


def test_schedule_log_growth_certifies_long_horizon():
    schedule, N = delta_schedule(0.0, GrowthFn("log", 1.0), 1.0, 10.0, 1_000_000)
    assert N is not None
    partial = np.cumsum(schedule)
    assert partial[N] >= 10.0
    assert partial[N - 1] < 10.0
    assert len(schedule) == N + 1


def test_K5_at_zero_horizon():
    for l, k5 in ((1, 1.0), (2, 0.5), (3, 2.0)):
        c = AssumptionConstants(k1=1.0, k2=1.0, k3=1.0, k4=1.0, k5=k5,
                                A=((0.0,),) * l, q_integrals=((0.0,),) * l)
        assert decoupling_lipschitz_K5(c, Dimensions(1, l, 1), 0.0) == pytest.approx(math.sqrt(l) * l * k5, rel=1e-12)


def test_K5_grows_with_horizon():
    values = [decoupling_lipschitz_K5(ALL_ONES, ONE, T) for T in (0.0, 0.1, 0.5, 1.0)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_pasted_constants_use_K5():
    p = builtin_problem("superquadratic_power", {"T": 0.02})
    bounds = compute_bounds(p, n_cap=10)
    pasted = replace(p.constants, k5=bounds.K5)
    assert bounds.M_bar == pytest.approx(z_bound_M(pasted, p.dims), rel=1e-12)
    assert bounds.C_bar == pytest.approx(local_horizon(pasted, p.dims), rel=1e-12)
    assert bounds.K5 >= p.constants.k5


@pytest.mark.parametrize("M, a, expected", [
    (1.0, 1.0, 1.0),
    (1.0, -1.0, -1.0),
    (1.0, 3.0, 2.0),
    (1.0, -3.0, -2.0),
    (1.0, 2.0, 1.75),
    (1.0, -2.0, -1.75),
    (1.0, 0.3, 0.3),
    (2.5, 10.0, 3.5),
    (0.0, 0.5, 0.4375),
])
def test_smooth_clamp_values(M, a, expected):
    assert smooth_clamp(a, M) == pytest.approx(expected, abs=1e-12)


@seed(20240611)
@settings(max_examples=50, deadline=None)
@given(M=st.floats(min_value=0.0, max_value=50.0))
def test_smooth_clamp_slope_and_range(M):
    a = np.linspace(-(M + 5.0), M + 5.0, 10_001)
    values = smooth_clamp(a, M)
    slopes = np.diff(values) / np.diff(a)
    assert np.all(slopes >= -1e-9)
    assert np.all(slopes <= 1.0 + 1e-6)
    assert np.all(np.abs(values) <= M + 1.0 + 1e-12)


@seed(20240612)
@settings(max_examples=50, deadline=None)
@given(R=st.floats(min_value=0.0, max_value=10.0), scale=st.floats(min_value=0.0, max_value=100.0))
def test_radial_clamp_bound(R, scale):
    rng = np.random.default_rng(0)
    z = scale * rng.standard_normal((200, 2, 3))
    clamped = radial_clamp(z, R)
    norms = np.sqrt(np.sum(clamped ** 2, axis=(1, 2)))
    assert np.all(norms <= R * (1.0 + 1e-12) + 1e-12)
    inside = np.sqrt(np.sum(z ** 2, axis=(1, 2))) <= R
    np.testing.assert_array_equal(clamped[inside], z[inside])


@seed(20240613)
@settings(max_examples=40, deadline=None)
@given(a=st.floats(min_value=0.0, max_value=5.0), extra=st.floats(min_value=0.0, max_value=5.0))
def test_Q_is_monotone_in_A(a, extra):
    low = AssumptionConstants(A=((a,),), q_integrals=((0.1,),))
    high = AssumptionConstants(A=((a + extra,),), q_integrals=((0.1,),))
    assert malliavin_bound_Q(low) <= malliavin_bound_Q(high)


@seed(20240614)
@settings(max_examples=40, deadline=None)
@given(k=st.floats(min_value=0.01, max_value=10.0), bump=st.floats(min_value=0.0, max_value=10.0))
def test_local_horizon_shrinks_with_constants(k, bump):
    base = AssumptionConstants(k1=k, k2=k, k3=k, k4=k, k5=1.0, lambda2=1.0)
    worse = AssumptionConstants(k1=k + bump, k2=k + bump, k3=k + bump, k4=k + bump, k5=1.0, lambda2=1.0)
    assert local_horizon(worse, ONE) <= local_horizon(base, ONE) * (1.0 + 1e-9)


def test_truncated_generator_is_lipschitz():
    p = builtin_problem("superquadratic_power", {"c": 1.0, "p": 2.0, "T": 0.1})
    R = 2.0
    g_tilde = truncate_generator(p.g, R)
    rng = np.random.default_rng(5)
    n = 5000
    z1 = 4.0 * rng.standard_normal((n, 1, 1))
    z2 = 4.0 * rng.standard_normal((n, 1, 1))
    x = np.zeros((n, 1))
    y = np.zeros((n, 1))
    dg = np.abs(g_tilde(0.0, x, y, z1) - g_tilde(0.0, x, y, z2))[:, 0]
    dz = np.abs(z1 - z2)[:, 0, 0]
    ratio = np.max(dg / np.where(dz > 0, dz, np.inf))
    assert ratio <= p.constants.rho(R) * 1.05
    assert np.any(g_tilde.activity(z1))
    assert not np.any(g_tilde.activity(np.clip(z1, -R, R)))


def test_pasting_grid():
    assert pasting_grid(1.0, 0.3) == pytest.approx([0.0, 0.3, 0.6, 0.9, 1.0])
    grid = pasting_grid(0.9, 0.3)
    assert len(grid) == 4 and grid[-1] == 0.9
    assert pasting_grid(0.5, math.inf) == [0.0, 0.5]
    assert pasting_grid(0.2, 0.5) == [0.0, 0.2]
    spacing = np.diff(pasting_grid(2.5, 0.7))
    assert np.all(spacing <= 0.7 + 1e-12)
    with pytest.raises(ValueError):
        pasting_grid(1.0, 0.0)


def test_bounds_report_frames():
    p = builtin_problem("martingale", {"T": 1.0})
    report = compute_bounds(p, n_cap=100)
    frame = report.to_frame()
    values = dict(zip(frame["constant"], frame["value"]))
    assert values["M"] == 4.0
    assert values["C_loc"] == pytest.approx(LOG2)
    schedule = report.schedule_frame()
    assert list(schedule.columns) == ["n", "delta_n", "partial_sum"]
    assert report.global_certificate_N is not None
    assert "C_loc" in report.format_text()


def test_bsde_intervals_layout():
    delta = LOG2 / 2.0
    pieces = bsde_intervals(1.0, [delta, delta, delta], math.sqrt(2.0))
    starts, ends, radii = zip(*pieces)
    assert starts == pytest.approx([0.0, 1.0 - 2 * delta, 1.0 - delta])
    assert ends == pytest.approx([1.0 - 2 * delta, 1.0 - delta, 1.0])
    assert radii == pytest.approx([4 * math.sqrt(2.0), 2 * math.sqrt(2.0), math.sqrt(2.0)])


def test_bsde_intervals_short_schedule_leaves_a_last_piece():
    pieces = bsde_intervals(1.0, [0.25, 0.25], 1.0)
    assert pieces == [(0.0, 0.5, 4.0), (0.5, 0.75, 2.0), (0.75, 1.0, 1.0)]
    assert bsde_intervals(0.5, [], 3.0) == [(0.0, 0.5, 3.0)]
    # a single term covering T is one piece at the base bound
    assert bsde_intervals(0.2, [0.3], 3.0) == [(0.0, 0.2, 3.0)]
    # negligible terms are folded into the remaining piece
    pieces = bsde_intervals(1.0, [0.5, 1e-20, 1e-30], 1.0)
    assert pieces == [(0.0, 0.5, 2.0), (0.5, 1.0, 1.0)]
    with pytest.raises(ValueError):
        bsde_intervals(0.0, [0.1], 1.0)
