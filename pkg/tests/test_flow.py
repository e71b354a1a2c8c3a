from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import wavy_metric
from flowharnack import alpha as al
from flowharnack import flow
from flowharnack import geometry as geo
from flowharnack import presets
from flowharnack.errors import CFLError, MissingAuxError, TrajectoryRangeError


@pytest.fixture(scope="module")
def ricci_small():
    return flow.evolve(al.Ricci(), wavy_metric(32, amp=0.1), T=0.05)


def test_ricci_preserves_area(ricci_small):
    areas = [ricci_small.metric(k).volume for k in range(len(ricci_small.times))]
    assert np.ptp(areas) / areas[0] < 1e-10


def test_ricci_smooths_conformal_factor(ricci_small):
    spread = [np.ptp(ricci_small.u[k]) for k in range(len(ricci_small.times))]
    assert all(np.diff(spread) < 0)


def test_flat_torus_is_fixed_by_ricci():
    m0 = geo.ConformalMetric.flat(geo.GridChart(16, 16))
    traj = flow.evolve(al.Ricci(), m0, T=0.05)
    assert np.max(np.abs(traj.u)) == 0.0


def test_static_keeps_metric():
    m0 = wavy_metric(16)
    traj = flow.evolve(al.Static(), m0, T=0.02)
    assert np.array_equal(traj.u[-1], m0.u)


def test_homothetic_schedule_matches_exact_scaling():
    # alpha = lam g(0) gives g(t) = (1 - 2 lam t) g(0)
    lam = 0.7
    m0 = wavy_metric(16)
    traj = flow.evolve(al.proportional_to_initial(lam, m0), m0, T=0.1)
    exact = m0.u + 0.5 * math.log(1 - 2 * lam * traj.T)
    assert np.max(np.abs(traj.u[-1] - exact)) < 1e-10


def test_final_time_is_exact(ricci_small):
    assert ricci_small.T == 0.05
    assert ricci_small.t0 == 0.0
    assert np.allclose(np.diff(ricci_small.times), ricci_small.dt)


def test_index_requires_stored_time(ricci_small):
    assert ricci_small.index(ricci_small.times[3]) == 3
    with pytest.raises(TrajectoryRangeError):
        ricci_small.index(0.5 * (ricci_small.times[3] + ricci_small.times[4]))
    with pytest.raises(TrajectoryRangeError):
        ricci_small.interior_index(ricci_small.T)


def test_stencil_differentiates_polynomials(ricci_small):
    t = ricci_small.times
    # three points next to the ends (exact for quadratics), five inside (exact for quartics)
    for k, p in ((1, 2), (len(t) - 2, 2), (5, 4)):
        d = ricci_small.time_derivative(lambda j: t[j] ** p, k)
        assert d == pytest.approx(p * t[k] ** (p - 1), rel=1e-8)


def test_oversized_fixed_step_aborts():
    m0 = wavy_metric(32)
    with pytest.raises(CFLError):
        flow.evolve(al.Ricci(), m0, T=0.1, dt_policy=flow.DtPolicy("fixed", dt=0.05))


def test_extended_needs_initial_scalar():
    with pytest.raises(MissingAuxError):
        flow.evolve(al.ExtendedRicci(), wavy_metric(16), T=0.01)


@pytest.mark.parametrize("kwargs", [{"kind": "other"}, {"kind": "fixed"}, {"safety": 0.0}, {"safety": 1.5}])
def test_dt_policy_validation(kwargs):
    with pytest.raises(ValueError):
        flow.DtPolicy(**kwargs)


def test_gauge_only_for_nonconformal_models(ricci_small):
    ext = presets.run_flow(presets.preset("extended-ricci", nx=32, ny=32, basepoint_i=8, basepoint_j=8, T=0.01))
    assert ricci_small.gauge(1) is None
    w = ext.gauge(1)
    assert w is not None and np.max(np.abs(w.x)) > 0
    assert ext.gauge_residual < 1e-8


def test_measured_bounds(ricci_small):
    b = flow.measure_bounds(ricci_small)
    m0 = ricci_small.metric(0)
    k0 = geo.gauss_curvature(m0)
    assert b.k1 >= float(np.max(-k0)) - 1e-15
    assert b.k4 >= 2 * float(np.max(np.abs(k0))) - 1e-15
    # alpha = K g, so its eigenvalue bounds are those of K
    assert b.k2 == pytest.approx(b.k1)
    flat = flow.measure_bounds(flow.evolve(al.Static(), geo.ConformalMetric.flat(geo.GridChart(16, 16)), T=0.01))
    assert flat.as_dict() == {"k1": 0.0, "k2": 0.0, "k3": 0.0, "k4": 0.0, "alpha_upper": 0.0}


def test_state_and_snapshot_at_stored_time(ricci_small):
    t = float(ricci_small.times[4])
    u, aux = ricci_small.state_at(t)
    assert np.array_equal(u, ricci_small.u[4]) and aux is None
    assert np.array_equal(ricci_small.snapshot_at(t).trace_s, ricci_small.snapshot(4).trace_s)
