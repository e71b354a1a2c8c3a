from __future__ import annotations

import math

import numpy as np
import pytest

from flowharnack import alpha as al
from flowharnack import conjugate as cj
from flowharnack import flow
from flowharnack import geometry as geo
from flowharnack import harnack as hk
from flowharnack import pipeline
from flowharnack.errors import TrajectoryRangeError


@pytest.fixture(scope="module")
def exact_gaussian():
    """The flat-torus kernel written down from the image sum, not solved for."""
    chart = geo.GridChart(64, 64, scheme="spectral")
    traj = flow.evolve(al.Static(), geo.ConformalMetric.flat(chart), T=0.2)
    y = (math.pi, math.pi)
    rho = np.array([cj.image_sum_kernel(chart, y, max(traj.T - t, 1e-3)) for t in traj.times])
    return cj.ConjugateSolution(traj, rho)


def test_equality_case_on_exact_gaussian(exact_gaussian):
    sol = exact_gaussian
    near = geo.torus_distance_sq(sol.traj.chart, (math.pi, math.pi)) <= (0.5 * math.pi) ** 2
    # the written-down Gaussian is only resolved by the grid once tau is a few cell widths squared
    for k in (0, len(sol.times) // 2, int(np.argmin(np.abs(sol.taus - 0.05)))):
        lhs = hk.harnack_field(sol, k)[near & sol.resolved(k)]
        assert np.max(np.abs(lhs)) <= hk.tol_equality(sol.traj.chart, sol.tau(k))


def test_integral_bound_vanishes_on_gaussian(exact_gaussian):
    sol = exact_gaussian
    one = cj.ForwardSolution(sol.traj, np.ones((len(sol.times),) + sol.traj.chart.shape))
    assert abs(hk.log_moment_integral(sol, one, len(sol.times) // 2)) < 1e-10


def test_identity_residual_small_for_smooth_data(ricci_ctx):
    traj = ricci_ctx.traj
    sol = cj.solve_conjugate(traj, pipeline.smooth_final_data(traj.chart))
    t = float(traj.times[len(traj.times) // 2])
    assert hk.identity_residual(sol, t) < 1e-4
    assert hk.ulogu_residual(sol, t) < 1e-4


def test_gradient_constants_frozen():
    bounds = flow.CurvatureBounds(k1=0.1, k2=0.2, k3=0.3, k4=0.4)
    c1, c2 = hk.gradient_constants(bounds)
    # K = 2 k1 + 4 k2 + 1 = 2; C1 = K + (e^{k4} - 1)(1 + K); C2 = 2 k2 + k3/2
    assert c1 == pytest.approx(2.0 + 3.0 * (math.exp(0.4) - 1.0), rel=1e-15)
    assert c2 == pytest.approx(0.55, rel=1e-15)


def test_gradient_constants_vanish_on_flat():
    assert hk.gradient_constants(flow.CurvatureBounds(0, 0, 0, 0)) == (1.0, 0.0)


def test_gradient_window_validation(ricci_ctx):
    ker, b = ricci_ctx.ker, ricci_ctx.bounds
    with pytest.raises(ValueError):
        hk.gradient_estimate_check(ker, b, 10, 4)
    with pytest.raises(TrajectoryRangeError):
        hk.gradient_estimate_check(ker, b, len(ker.traj.times) - 3, 10)


def test_probe_indices_order_and_range(ricci_ctx):
    ker = ricci_ctx.ker
    ks = hk.probe_indices(ker)
    assert ks == sorted(ks, reverse=True)
    K = len(ker.traj.times) - 1
    assert ks[0] == K - hk.PROBE_START
    assert len(hk.probe_indices(ker, count=7)) <= 7


def test_rho_one_is_integral_of_v(ricci_ctx):
    ker = ricci_ctx.ker
    series = hk.rho_phi(ker, ricci_ctx.fwd_one)
    k = sorted(hk.probe_indices(ker, clean=True))[0]
    direct = geo.integrate(ker.traj.metric(k), hk.v_field(ker, k, hk.INTEGRAL_FLOOR))
    assert series.rho[0] == pytest.approx(direct, rel=1e-12)
    assert series.monotone and series.limit_ok


def test_rho_duality(ricci_ctx):
    ker = ricci_ctx.ker
    t = float(ker.traj.times[len(ker.traj.times) // 2])
    assert hk.rho_duality_residual(ker, t) < 1e-5


def test_harnack_max_nonpositive_up_to_tolerance(ricci_ctx):
    rep = hk.check_harnack(ricci_ctx.ker, count=10)
    assert rep.passed
    assert all(tau > 0 for tau, _ in rep.per_time)


def test_linf_constant_is_max_scaled_sup(flat_ctx):
    ker = flat_ctx.ker
    tau = ker.tau(ker.clean_index())
    c = hk.linf_constant(ker, tau)
    # tau max H -> 1/(4 pi) for a flat Gaussian
    assert c == pytest.approx(1 / (4 * math.pi), rel=1e-3)
