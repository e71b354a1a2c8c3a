"""Forward integration of ``dg/dt = -2 alpha`` inside the conformal class.

The metric is ``exp(2u) delta``.  When ``alpha`` is pure trace the conformal
factor obeys ``du/dt = -S/2``.  When ``alpha`` has a trace-free part the
default ``nonconformal="gauge"`` mode follows the flow up to a time-dependent
diffeomorphism generated by a contravariant field ``W`` solving
``(L_W g)° = 2 alpha°``: then ``du/dt = -S/2 + div_g(W)/2`` and every scalar
carried by the flow is transported, ``d(phi)/dt = Delta phi + W.grad phi``.
Each true time derivative of a scalar becomes ``d/dt - W.grad`` in the chart.
``"project"`` drops the trace-free part and ``"refuse"`` raises instead.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .alpha import TRACE_FREE_TOL, make_alpha
from .errors import (
    CFLError,
    DegenerateMetricError,
    FlowHarnackError,
    MissingAuxError,
    TrajectoryRangeError,
)

log = logging.getLogger(__name__)

NONCONFORMAL_MODES = ("gauge", "project", "refuse")
# Stability bound of classical RK4 on the negative real axis.
RK4_REAL_LIMIT = 2.785
TIME_MATCH = 1e-9


@dataclass(frozen=True)
class DtPolicy:
    kind: str = "cfl"
    safety: float = 0.2
    dt: float | None = None

    def __post_init__(self):
        if self.kind not in ("cfl", "fixed"):
            raise ValueError(f"unknown dt policy {self.kind!r}")
        if self.kind == "fixed" and not (self.dt and self.dt > 0):
            raise ValueError("fixed dt policy needs a positive dt")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")


def cfl_dt(m, safety=0.2):
    return safety * m.chart.hmin**2 * math.exp(2.0 * float(m.u.min())) / 4.0


def stability_limit(m):
    """Largest RK4 step for the diffusion ``exp(-2u) lap0`` on this grid and scheme."""
    return RK4_REAL_LIMIT * math.exp(2.0 * float(m.u.min())) / m.chart.max_second_symbol


def gauge_field(m, al):
    """Contravariant ``W`` with ``(L_W g)° = 2 alpha°`` and the unsolvable residual.

    The residual is the size of the trace-free data living in modes where the
    discrete Cauchy-Riemann operator is singular (the constant mode carries the
    flat-torus Teichmuller direction).
    """
    c = m.chart
    a_hat = np.fft.fft2(m.inv_conf * (al.xx - al.yy))
    b_hat = np.fft.fft2(2.0 * m.inv_conf * al.xy)
    sx = c.first_symbol(0)[:, None]
    sy = c.first_symbol(1)[None, :]
    den = sx**2 + sy**2
    null = den == 0.0
    safe = np.where(null, 1.0, den)
    w1 = np.where(null, 0.0, -1j * (sx * a_hat + sy * b_hat) / safe)
    w2 = np.where(null, 0.0, -1j * (sx * b_hat - sy * a_hat) / safe)
    n = c.nx * c.ny
    residual = float(np.sqrt(np.sum(np.abs(a_hat[null]) ** 2 + np.abs(b_hat[null]) ** 2)) / n)
    return geo.Vector(np.fft.ifft2(w1).real, np.fft.ifft2(w2).real), residual


class RateEvaluator:
    """Right-hand side of the conformal-factor system for one model."""

    def __init__(self, model, nonconformal="gauge"):
        if nonconformal not in NONCONFORMAL_MODES:
            raise ValueError(f"nonconformal must be one of {NONCONFORMAL_MODES}")
        self.model = model
        self.nonconformal = nonconformal
        self.max_residual = 0.0

    def uses_gauge(self):
        return self.nonconformal == "gauge" and not self.model.conformal

    def __call__(self, chart, u, aux, t):
        m = geo.ConformalMetric(chart, u)
        snap = make_alpha(self.model, m, aux, t)
        du = -0.5 * snap.trace_s
        w = None
        if not self.model.conformal:
            if self.nonconformal == "refuse" and snap.trace_free_size() > TRACE_FREE_TOL:
                raise FlowHarnackError(
                    f"alpha has a trace-free part ({snap.trace_free_size():.3e}) and nonconformal='refuse'"
                )
            if self.nonconformal == "gauge":
                w, res = gauge_field(m, snap.alpha)
                self.max_residual = max(self.max_residual, res)
                du = du + 0.5 * geo.divergence_vector(m, w)
        daux = self.model.aux_rate(m, aux) if self.model.needs_aux else None
        if w is not None and daux is not None:
            daux = daux + geo.directional(m, w, aux)
        return du, daux, snap, w


class FlowTrajectory:
    """Stored metric (and scalar field) snapshots of one forward run.

    ``u`` has shape ``(K+1, nx, ny)``.  Snapshots, gauge fields and rates are
    recomputed lazily from the stored state and cached.
    """

    def __init__(self, chart, model, times, u, aux=None, dt=None, store_stride=1,
                 nonconformal="gauge", gauge_residual=0.0):
        self.chart = chart
        self.model = model
        self.times = np.asarray(times, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.aux = None if aux is None else np.asarray(aux, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.u.shape != (len(self.times),) + chart.shape:
            raise ValueError("stored conformal factors do not match times and grid")
        self.dt = float(dt) if dt is not None else float(np.min(np.diff(self.times)))
        self.store_stride = int(store_stride)
        self.nonconformal = nonconformal
        self.gauge_residual = float(gauge_residual)
        self._rates = RateEvaluator(model, nonconformal)
        self._cache = {}

    def __len__(self):
        return len(self.times)

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def store_dt(self):
        return float(np.max(np.diff(self.times))) if len(self.times) > 1 else 0.0

    def index(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > TIME_MATCH * max(1.0, abs(self.T)):
            raise TrajectoryRangeError(f"t={t} is not a stored trajectory time")
        return k

    def interior_index(self, t):
        k = self.index(t)
        if k == 0 or k == len(self.times) - 1:
            raise TrajectoryRangeError(f"t={t} is a trajectory endpoint; an interior time is needed")
        return k

    def metric(self, k):
        return geo.ConformalMetric(self.chart, self.u[k])

    def stencil(self, k):
        """Offsets and weights of the centered time difference used at interior index ``k``.

        Five points (fourth order) where the neighbours exist and are evenly
        spaced, otherwise three.
        """
        K = len(self.times) - 1
        if not 0 < k < K:
            raise TrajectoryRangeError(f"index {k} is not interior")
        if k >= 2 and k <= K - 2:
            gaps = np.diff(self.times[k - 2:k + 3])
            if np.ptp(gaps) <= 1e-9 * gaps.max():
                dt = gaps.mean()
                return ((-2, 1 / (12 * dt)), (-1, -8 / (12 * dt)), (1, 8 / (12 * dt)), (2, -1 / (12 * dt)))
        span = self.times[k + 1] - self.times[k - 1]
        return ((-1, -1 / span), (1, 1 / span))

    def time_derivative(self, field_at, k):
        """``d/dt`` of a stored quantity, ``field_at(j)`` giving its value at index ``j``."""
        return sum(w * field_at(k + off) for off, w in self.stencil(k))

    def aux_field(self, k):
        return None if self.aux is None else self.aux[k]

    def _evaluate(self, k):
        if k not in self._cache:
            self._cache[k] = self._rates(self.chart, self.u[k], self.aux_field(k), float(self.times[k]))
        return self._cache[k]

    def snapshot(self, k):
        return self._evaluate(k)[2]

    def gauge(self, k):
        return self._evaluate(k)[3]

    def rates(self, k):
        du, daux, _, _ = self._evaluate(k)
        return du, daux

    def _check_range(self, t):
        tol = TIME_MATCH * max(1.0, abs(self.T))
        if t < self.t0 - tol or t > self.T + tol:
            raise TrajectoryRangeError(f"t={t} outside [{self.t0}, {self.T}]")

    def _bracket(self, t):
        self._check_range(t)
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        return j, (t - self.times[j]) / (self.times[j + 1] - self.times[j])

    def state_at(self, t, cubic=True):
        """Conformal factor and scalar field at any ``t`` (cubic Hermite by default)."""
        if len(self.times) == 1:
            self._check_range(t)
            return self.u[0], self.aux_field(0)
        j, s = self._bracket(t)
        if s == 0.0:
            return self.u[j], self.aux_field(j)
        if not cubic:
            u = (1 - s) * self.u[j] + s * self.u[j + 1]
            aux = None if self.aux is None else (1 - s) * self.aux[j] + s * self.aux[j + 1]
            return u, aux
        h = self.times[j + 1] - self.times[j]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        du0, da0 = self.rates(j)
        du1, da1 = self.rates(j + 1)
        u = h00 * self.u[j] + h10 * h * du0 + h01 * self.u[j + 1] + h11 * h * du1
        aux = None
        if self.aux is not None:
            aux = h00 * self.aux[j] + h10 * h * da0 + h01 * self.aux[j + 1] + h11 * h * da1
        return u, aux

    def metric_at(self, t, method="linear"):
        u, _ = self.state_at(t, cubic=(method == "cubic"))
        return geo.ConformalMetric(self.chart, u)

    def aux_at(self, t, method="linear"):
        return self.state_at(t, cubic=(method == "cubic"))[1]

    def snapshot_at(self, t):
        k = None
        try:
            k = self.index(t)
        except TrajectoryRangeError:
            pass
        if k is not None:
            return self.snapshot(k)
        u, aux = self.state_at(t)
        return make_alpha(self.model, geo.ConformalMetric(self.chart, u), aux, t)

    def gauge_at(self, t):
        if not self._rates.uses_gauge():
            return None
        u, aux = self.state_at(t)
        return self._rates(self.chart, u, aux, t)[3]

    def volumes(self):
        return np.array([self.metric(k).volume for k in range(len(self.times))])

    def volume_residual(self):
        """Max over interior times of ``|dV/dt + int S dmu|`` (centered differences)."""
        vols = self.volumes()
        worst = 0.0
        for k in range(1, len(self.times) - 1):
            rate = (vols[k + 1] - vols[k - 1]) / (self.times[k + 1] - self.times[k - 1])
            snap = self.snapshot(k)
            worst = max(worst, abs(rate + geo.integrate(snap.metric, snap.trace_s)))
        return worst


def memory_estimate(chart, steps, stride, with_aux):
    stored = steps // stride + 2
    return stored * (2 if with_aux else 1) * chart.nx * chart.ny * 8


def evolve(model, m0, aux0=None, T=0.1, dt_policy=None, store_stride=1, nonconformal="gauge", t0=0.0):
    """Classical RK4 from ``t0`` to ``t0 + T``; returns the stored trajectory.

    The CFL policy picks ``safety h^2 exp(2 min u)/4`` from the initial metric
    and shrinks it so that a whole number of equal steps reaches ``T``.  Each
    step is re-validated against the RK4 stability limit of the current metric.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    policy = dt_policy or DtPolicy()
    store_stride = int(store_stride)
    if store_stride < 1:
        raise ValueError("store_stride must be >= 1")
    chart = m0.chart
    if model.needs_aux and aux0 is None:
        raise MissingAuxError(f"{model.tag} requires an initial auxiliary field")
    dt0 = cfl_dt(m0, policy.safety) if policy.kind == "cfl" else policy.dt
    steps = max(1, math.ceil(T / dt0 - 1e-9))
    dt = T / steps
    log.info(
        "evolve: %d steps of %.3e, %d snapshots, ~%.1f MB",
        steps, dt, steps // store_stride + 2,
        memory_estimate(chart, steps, store_stride, aux0 is not None) / 2**20,
    )
    rates = RateEvaluator(model, nonconformal)
    u = np.array(m0.u, dtype=float)
    aux = None if aux0 is None else np.array(aux0, dtype=float)
    times, us, auxs = [t0], [u.copy()], [None if aux is None else aux.copy()]

    def f(uu, aa, tt):
        try:
            du, da, _, _ = rates(chart, uu, aa, tt)
        except DegenerateMetricError as err:
            raise DegenerateMetricError(str(err), tt) from None
        return du, da

    for i in range(steps):
        t = t0 + i * dt
        limit = stability_limit(geo.ConformalMetric(chart, u))
        if dt > limit:
            raise CFLError(dt, limit)
        k1u, k1a = f(u, aux, t)
        k2u, k2a = f(u + 0.5 * dt * k1u, None if aux is None else aux + 0.5 * dt * k1a, t + 0.5 * dt)
        k3u, k3a = f(u + 0.5 * dt * k2u, None if aux is None else aux + 0.5 * dt * k2a, t + 0.5 * dt)
        k4u, k4a = f(u + dt * k3u, None if aux is None else aux + dt * k3a, t + dt)
        u = u + dt / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        if aux is not None:
            aux = aux + dt / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        t_new = t0 + (i + 1) * dt
        try:
            geo.ConformalMetric(chart, u)
        except DegenerateMetricError as err:
            raise DegenerateMetricError(str(err), t_new) from None
        if (i + 1) % store_stride == 0 or i + 1 == steps:
            times.append(t_new)
            us.append(u.copy())
            auxs.append(None if aux is None else aux.copy())
    times[-1] = t0 + T
    if rates.max_residual > 1e-8:
        log.warning("trace-free alpha has an unsolvable constant-mode part (%.3e)", rates.max_residual)
    return FlowTrajectory(
        chart, model, times, np.stack(us), None if aux is None else np.stack(auxs),
        dt=dt, store_stride=store_stride, nonconformal=nonconformal, gauge_residual=rates.max_residual,
    )


@dataclass(frozen=True)
class CurvatureBounds:
    k1: float
    k2: float
    k3: float
    k4: float
    alpha_upper: float = 0.0

    def as_dict(self):
        return {"k1": self.k1, "k2": self.k2, "k3": self.k3, "k4": self.k4, "alpha_upper": self.alpha_upper}


def measure_bounds(traj):
    """Lower Ricci and alpha bounds, ``sup |grad S|^2`` and ``sup |S|`` over all snapshots.

    ``alpha_upper`` is the largest eigenvalue of ``alpha`` relative to ``g``,
    needed for the upper half of the reduced-distance sandwich.
    """
    k1 = k2 = k3 = k4 = up = 0.0
    for k in range(len(traj.times)):
        snap = traj.snapshot(k)
        m = snap.metric
        k1 = max(k1, float(np.max(-geo.gauss_curvature(m))))
        lo, hi = geo.relative_eigenvalues(m, snap.alpha)
        k2 = max(k2, float(np.max(-lo)))
        up = max(up, float(np.max(hi)))
        k3 = max(k3, float(np.max(geo.grad_norm_sq(m, snap.trace_s))))
        k4 = max(k4, float(np.max(np.abs(snap.trace_s))))
    return CurvatureBounds(k1, k2, k3, k4, up)
