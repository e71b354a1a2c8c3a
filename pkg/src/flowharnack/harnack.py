"""The Harnack quantity, its evolution identity, ``rho_Phi`` and the kernel bounds.

All quantities are built from ``u`` and its derivatives rather than from
``h = -log u - log(4 pi tau)``: ``h`` is smooth only away from the cut locus of
the basepoint, while ``u`` is smooth everywhere, so this keeps spectral
differentiation clean.  With ``f = -log u - (n/2) log(4 pi tau)``

    grad f = -grad u / u,    2 lap f - |grad f|^2 = -2 lap u / u + |grad u|^2 / u^2.

Checks on kernels restrict to the *resolved* set where ``u`` exceeds a fixed
fraction of its maximum; outside it the discrete kernel carries no relative
accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .alpha import ds_dt_from_trajectory, eval_dalpha
from .conjugate import image_tail
from .errors import TrajectoryRangeError

N_DIM = 2
RESOLVED_FLOOR = 1e-8
# Integrals keep every point above the noise threshold.
INTEGRAL_FLOOR = 1e-300
TOL_LIMIT = 5e-3 * N_DIM
MONO_REL = 1e-4
PROBE_START = 25


@dataclass
class _Slice:
    """Derivatives of one stored slice of a positive solution."""

    k: int
    tau: float
    metric: geo.ConformalMetric
    u: np.ndarray
    grad_u: geo.Vector
    lap_u: np.ndarray
    s: np.ndarray
    positive: np.ndarray

    @property
    def inv_u(self):
        return np.where(self.positive, 1.0 / np.where(self.positive, self.u, 1.0), 0.0)

    @property
    def grad_f(self):
        return self.grad_u.scale(-self.inv_u)

    @property
    def f(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            logu = np.log(np.where(self.positive, self.u, 1.0))
        return np.where(self.positive, -logu - 0.5 * N_DIM * math.log(4.0 * math.pi * self.tau), np.nan)

    def grad_u_sq_over_u(self):
        return geo.norm_sq(self.metric, self.grad_u) * self.inv_u


def _slice(sol, k):
    traj = sol.traj
    m = traj.metric(k)
    u = sol.u(k)
    return _Slice(
        k, sol.tau(k), m, u, geo.gradient(m, u), geo.laplace_beltrami(m, u),
        traj.snapshot(k).trace_s, u > 0,
    )


def _require_tau(sol, k):
    if sol.tau(k) <= 0:
        raise TrajectoryRangeError("the Harnack quantity needs tau = T - t > 0")


def harnack_field(sol, k):
    """``tau (2 lap f - |grad f|^2 + S) + f - n`` at stored index ``k`` (NaN where ``u <= 0``)."""
    _require_tau(sol, k)
    sl = _slice(sol, k)
    iu = sl.inv_u
    core = -2.0 * sl.lap_u * iu + geo.norm_sq(sl.metric, sl.grad_u) * iu**2 + sl.s
    out = sl.tau * core + sl.f - N_DIM
    return np.where(sl.positive, out, np.nan)


def harnack_lhs(ker, t, floor=RESOLVED_FLOOR):
    """Harnack quantity at time ``t`` on the resolved set (NaN elsewhere)."""
    k = ker.index(t)
    out = harnack_field(ker, k)
    if floor is not None:
        out = np.where(ker.resolved(k, floor), out, np.nan)
    return out


def v_field(sol, k, floor=None):
    """``v = (Harnack quantity) u``; set to zero outside the resolved set when ``floor`` is given."""
    _require_tau(sol, k)
    sl = _slice(sol, k)
    v = sl.tau * (-2.0 * sl.lap_u + sl.grad_u_sq_over_u() + sl.s * sl.u) + (sl.f - N_DIM) * sl.u
    keep = sl.positive if floor is None else sol.resolved(k, floor)
    return np.where(keep, v, 0.0)


def _stencil_indices(sol, k):
    return [k] + [k + off for off, _ in sol.traj.stencil(k)]


def _box_star(sol, series, k):
    """Chart form of ``d/dtau + W.grad - lap + S`` applied to a stored field series at ``k``."""
    traj = sol.traj
    m = traj.metric(k)
    dtau = -traj.time_derivative(series.__getitem__, k)
    out = dtau - geo.laplace_beltrami(m, series[k]) + traj.snapshot(k).trace_s * series[k]
    w = traj.gauge(k)
    if w is not None:
        out = out + geo.directional(m, w, series[k])
    return out


def _interior(sol, t):
    k = sol.traj.interior_index(t)
    if any(sol.tau(j) <= 0 for j in _stencil_indices(sol, k)):
        raise TrajectoryRangeError("identity checks need tau > 0 at the neighbouring times")
    return k


def identity_rhs(sol, k):
    """``-2 tau u |alpha + Hess f - g / 2 tau|^2 - tau u D_alpha(grad f)``."""
    traj = sol.traj
    sl = _slice(sol, k)
    m, iu = sl.metric, sl.inv_u
    snap = traj.snapshot(k)
    hess_u = geo.hessian(m, sl.u)
    hess_f = hess_u.scale(-iu).plus(geo.outer(sl.grad_u).scale(iu**2))
    g = m.tensor()
    tens = snap.alpha.plus(hess_f).minus(g.scale(0.5 / sl.tau))
    d = eval_dalpha(snap, ds_dt_from_trajectory(traj, k), sl.grad_f).value
    return -2.0 * sl.tau * sl.u * geo.tensor_norm_sq(m, tens) - sl.tau * sl.u * d


def identity_residual(sol, t, floor=None):
    """Sup-norm of ``Box* v - RHS`` at an interior time ``t``."""
    k = _interior(sol, t)
    series = {j: v_field(sol, j) for j in _stencil_indices(sol, k)}
    res = np.abs(_box_star(sol, series, k) - identity_rhs(sol, k))
    if floor is not None:
        res = res[sol.resolved(k, floor)]
    return float(np.max(res))


def ulogu_residual(sol, t, floor=None):
    """Sup-norm of ``-Box*(u log u) - (u |grad log u|^2 + u S)`` at an interior time ``t``."""
    k = sol.traj.interior_index(t)
    series = {}
    for j in _stencil_indices(sol, k):
        u = sol.u(j)
        series[j] = np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)
    sl = _slice(sol, k)
    rhs = sl.grad_u_sq_over_u() + sl.u * sl.s
    res = np.abs(-_box_star(sol, series, k) - rhs)
    if floor is not None:
        res = res[sol.resolved(k, floor)]
    return float(np.max(res))


# ---------------------------------------------------------------------------
# tolerances

def tol_harnack(traj):
    """``20 h^2 max|S|`` plus the nearest-image size at the largest tau."""
    s_scale = max(float(np.max(np.abs(traj.snapshot(k).trace_s))) for k in range(len(traj.times)))
    tau_max = traj.T - traj.t0
    tail = image_tail(traj.chart, tau_max) / (4.0 * math.pi * tau_max)
    return 20.0 * traj.chart.hmin**2 * s_scale + tail


def tol_equality(chart, tau):
    return 10.0 * (chart.hmin**2 + image_tail(chart, tau) / (4.0 * math.pi * tau))


def single_image_mask(ker):
    """Points within a quarter period of the basepoint (in the flat chart)."""
    c = ker.traj.chart
    d2 = geo.torus_distance_sq(c, ker.y)
    return d2 <= (0.25 * min(c.lx, c.ly)) ** 2


def probe_indices(ker, tau_min=None, count=None, clean=False):
    """Stored indices with ``tau >= tau_min``, latest first.

    The default ``tau_min`` is ``PROBE_START`` steps into the kernel solve
    (past the burn-in, where the kernel matches its flat oracle), or with
    ``clean=True`` the first slice free of representation noise (used for
    integrals).
    """
    traj = ker.traj
    K = len(traj.times) - 1
    if tau_min is None:
        if clean:
            tau_min = ker.tau(ker.clean_index())
        else:
            start = max(PROBE_START, ker.n_burn)
            tau_min = ker.tau(K - start) if K - start >= 0 else traj.T
    ks = [k for k in range(K - 1, -1, -1) if ker.tau(k) >= tau_min - 1e-12]
    if count is not None and len(ks) > count:
        pick = np.unique(np.round(np.linspace(0, len(ks) - 1, count)).astype(int))
        ks = [ks[i] for i in pick]
    return ks


@dataclass
class HarnackMaxReport:
    max_lhs: float
    tol: float
    passed: bool
    per_time: list = field(default_factory=list)
    floor: float = RESOLVED_FLOOR

    def to_record(self):
        return {"max_lhs": self.max_lhs, "tol": self.tol, "passed": self.passed, "floor": self.floor}


def check_harnack(ker, tau_min=None, count=None, floor=RESOLVED_FLOOR, tol=None):
    """Max of the Harnack quantity over the resolved set at every probed time."""
    tol = tol_harnack(ker.traj) if tol is None else tol
    rows = []
    for k in probe_indices(ker, tau_min, count):
        lhs = harnack_field(ker, k)[ker.resolved(k, floor)]
        if lhs.size == 0:
            continue
        rows.append((ker.tau(k), float(np.max(lhs))))
    worst = max(r[1] for r in rows)
    return HarnackMaxReport(worst, tol, worst <= tol, rows, floor)


def check_equality_case(ker, tau_min=None, count=None, floor=RESOLVED_FLOOR):
    """``|Harnack quantity| <= 10 (h^2 + image tail)`` within a quarter period of ``y``."""
    mask_near = single_image_mask(ker)
    rows, ok = [], True
    for k in probe_indices(ker, tau_min, count):
        lhs = harnack_field(ker, k)[mask_near & ker.resolved(k, floor)]
        if lhs.size == 0:
            continue
        err = float(np.max(np.abs(lhs)))
        tol = tol_equality(ker.traj.chart, ker.tau(k))
        ok &= err <= tol
        rows.append((ker.tau(k), err, tol))
    worst = max(r[1] for r in rows)
    return HarnackMaxReport(worst, max(r[2] for r in rows), ok, rows, floor)


# ---------------------------------------------------------------------------
# rho_Phi and the integral bound

@dataclass
class RhoSeries:
    taus: np.ndarray
    rho: np.ndarray
    tol_mono: float
    tol_limit: float

    @property
    def increments(self):
        # ordered by increasing t, i.e. decreasing tau
        return np.diff(self.rho)

    @property
    def monotone(self):
        return bool(np.all(self.increments >= -self.tol_mono))

    @property
    def final(self):
        return float(self.rho[-1])

    @property
    def limit_ok(self):
        return abs(self.final) <= self.tol_limit

    def to_record(self):
        return {
            "rho_first": float(self.rho[0]),
            "rho_final": self.final,
            "tau_final": float(self.taus[-1]),
            "min_increment": float(self.increments.min()) if len(self.rho) > 1 else 0.0,
            "tol_mono": self.tol_mono,
            "tol_limit": self.tol_limit,
            "monotone": self.monotone,
            "limit_ok": self.limit_ok,
        }


def rho_phi(ker, fwd, tau_min=None, floor=INTEGRAL_FLOOR, tol_limit=TOL_LIMIT):
    """``rho_Phi(t) = int v Phi dmu`` at stored times with ``tau >= tau_min``, ordered by increasing t."""
    ks = sorted(probe_indices(ker, tau_min, clean=True))
    vals = []
    for k in ks:
        v = v_field(ker, k, floor)
        vals.append(geo.integrate(ker.traj.metric(k), v * fwd.phi[k]))
    rho = np.array(vals)
    tol_mono = MONO_REL * float(np.max(np.abs(rho))) if len(rho) else 0.0
    return RhoSeries(np.array([ker.tau(k) for k in ks]), rho, tol_mono, tol_limit)


def rho_duality_residual(ker, t, floor=INTEGRAL_FLOOR):
    """``|d rho_1/dt - int(-Box* v) dmu|`` at an interior time (``Phi = 1``)."""
    k = _interior(ker, t)
    traj = ker.traj
    series = {j: v_field(ker, j, floor) for j in _stencil_indices(ker, k)}
    rho = {j: geo.integrate(traj.metric(j), series[j]) for j in series}
    rate = traj.time_derivative(rho.__getitem__, k)
    return abs(rate - geo.integrate(traj.metric(k), -_box_star(ker, series, k)))


def log_moment_integral(ker, fwd, k, floor=INTEGRAL_FLOOR):
    """``int (h - n/2) H Phi dmu`` at stored index ``k``."""
    u = ker.u(k)
    keep = ker.resolved(k, floor)
    h = np.where(keep, ker.h(k), 0.0)
    return geo.integrate(ker.traj.metric(k), np.where(keep, (h - 0.5 * N_DIM) * u * fwd.phi[k], 0.0))


# ---------------------------------------------------------------------------
# gradient and sup bounds for positive conjugate solutions

def gradient_constants(bounds, n=N_DIM):
    """``(C1, C2)`` valid for windows of length ``sigma <= 1``.

    With ``K = 2 k1 + (2 + n) k2 + 1`` the functions ``a = sigma / (1 + K sigma)``,
    ``b = exp(k4 sigma)`` and ``c = exp(k4 sigma) (n k2 sigma + k3 sigma^2 / 2)``
    make the barrier a subsolution, giving
    ``sigma |grad q|^2 / q^2 <= (1 + K sigma) exp(k4 sigma) (ln(Q/q) + n k2 sigma + k3 sigma^2 / 2)``.
    For ``sigma <= 1`` convexity of ``exp`` bounds this by the stated constants.
    """
    ka = 2.0 * bounds.k1 + (2.0 + n) * bounds.k2 + 1.0
    c1 = ka + math.expm1(bounds.k4) * (1.0 + ka)
    c2 = n * bounds.k2 + 0.5 * bounds.k3
    return c1, c2


@dataclass
class GradientReport:
    sigma: float
    c1: float
    c2: float
    max_excess: float
    min_margin: float
    passed: bool

    def to_record(self):
        return dict(self.__dict__)


def gradient_estimate_check(sol, bounds, k_end, window_steps, floor=RESOLVED_FLOOR, slack=0.0):
    """Assert ``sigma |grad q|^2/q^2 <= (1 + C1 sigma)(ln(Q/q) + C2 sigma)`` at the window end.

    The window runs over stored indices ``k_end + window_steps`` (its start,
    where tau is smaller) down to ``k_end``; ``Q`` is the sup of ``q`` over
    the window.
    """
    if window_steps < 5:
        raise ValueError("gradient window must span at least 5 steps")
    k_start = k_end + window_steps
    if k_start >= len(sol.traj.times):
        raise TrajectoryRangeError("window extends past the start of the trajectory")
    sigma = sol.tau(k_end) - sol.tau(k_start)
    if sigma > 1.0:
        raise ValueError("the gradient estimate is stated for windows of length <= 1")
    c1, c2 = gradient_constants(bounds)
    q_sup = max(float(sol.u(j).max()) for j in range(k_end, k_start + 1))
    m = sol.traj.metric(k_end)
    q = sol.u(k_end)
    keep = sol.resolved(k_end, floor)
    qk = q[keep]
    lhs = sigma * geo.grad_norm_sq(m, q)[keep] / qk**2
    rhs = (1.0 + c1 * sigma) * (np.log(q_sup / qk) + c2 * sigma)
    excess = float(np.max(lhs - rhs))
    margin = float(np.min(rhs - lhs))
    return GradientReport(sigma, c1, c2, excess, margin, excess <= slack)


def linf_constant(sol, tau_min=0.0):
    """``max over stored tau >= tau_min of tau^{n/2} max_x q``."""
    best = 0.0
    for k in range(len(sol.traj.times)):
        tau = sol.tau(k)
        if tau > 0 and tau >= tau_min:
            best = max(best, tau ** (N_DIM / 2) * float(sol.u(k).max()))
    return best
