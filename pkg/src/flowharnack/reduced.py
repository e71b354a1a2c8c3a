"""L-length, reduced distance and reduced volume by direct curve optimization.

Curves run backward from the basepoint ``y`` at the final time (``tau = 0``)
to an endpoint ``x`` at ``tau_1``.  With ``s = sqrt(tau)`` the length is

    L = int_0^{s_1} (2 s^2 S + 1/2 |d gamma/ds|^2) ds,

which is smooth in the node positions.  Curves are stored in the flat chart
as unwrapped lifts; the reduced distance is ``ell = L_min / (2 sqrt(tau_1))``.

When the flow carries a gauge field ``W`` (chart velocity of the
diffeomorphism that keeps the metric conformal) a chart-fixed curve is not a
manifold-fixed curve, and the true velocity is ``d gamma/ds - 2 s W``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import geometry as geo
from .errors import ConvergenceError, FlowHarnackError, TrajectoryRangeError

log = logging.getLogger(__name__)

N_DIM = 2
NODES = 32
LIFTS = 9
STARTS = 5
MAX_ITER = 3000
FTOL = 1e-12


# ---------------------------------------------------------------------------
# periodic bilinear interpolation

class _Bilinear:
    def __init__(self, chart, fields):
        """``fields`` has shape ``(nslices, nx, ny)``."""
        self.chart = chart
        self.f = np.asarray(fields, dtype=float)

    def __call__(self, slices, px, py, grad=False):
        c = self.chart
        fx = px / c.hx
        fy = py / c.hy
        ix = np.floor(fx)
        iy = np.floor(fy)
        wx = fx - ix
        wy = fy - iy
        i0 = ix.astype(np.int64) % c.nx
        j0 = iy.astype(np.int64) % c.ny
        i1 = (i0 + 1) % c.nx
        j1 = (j0 + 1) % c.ny
        f = self.f
        f00 = f[slices, i0, j0]
        f10 = f[slices, i1, j0]
        f01 = f[slices, i0, j1]
        f11 = f[slices, i1, j1]
        val = (1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f10 + (1 - wx) * wy * f01 + wx * wy * f11
        if not grad:
            return val
        gx = ((1 - wy) * (f10 - f00) + wy * (f11 - f01)) / c.hx
        gy = ((1 - wx) * (f01 - f00) + wx * (f11 - f10)) / c.hy
        return val, gx, gy


def s_weights(s):
    """Exact weights of ``int 2 s^2 f ds`` for ``f`` piecewise linear on the nodes ``s``."""
    w = np.zeros(len(s))
    for j in range(len(s) - 1):
        a, b = s[j], s[j + 1]
        mid = 0.5 * (a + b)
        # Simpson is exact for the cubic integrands 2 s^2 * hat(s); each hat is 1/2 at mid.
        w[j] += (b - a) / 6.0 * (2.0 * a * a + 4.0 * mid * mid)
        w[j + 1] += (b - a) / 6.0 * (4.0 * mid * mid + 2.0 * b * b)
    return w


@dataclass
class CurveFields:
    """Time slices of the flow sampled along the ``s`` nodes of a curve family."""

    chart: geo.GridChart
    s: np.ndarray
    weights: np.ndarray
    scalar: _Bilinear
    conf: _Bilinear
    gauge: tuple | None = None
    tau1: float = 0.0

    @property
    def nodes(self):
        return len(self.s) - 1


def curve_fields(traj, tau1, nodes=NODES):
    """Sample ``S`` at the nodes and ``exp(2u)`` (and the gauge) at segment midpoints."""
    if not (0.0 < tau1 <= traj.T - traj.t0 + 1e-12):
        raise TrajectoryRangeError(f"tau_1={tau1} outside (0, {traj.T - traj.t0}]")
    s1 = math.sqrt(tau1)
    s = np.linspace(0.0, s1, nodes + 1)
    mids = 0.5 * (s[1:] + s[:-1])
    t_nodes = np.clip(traj.T - s**2, traj.t0, traj.T)
    t_mids = np.clip(traj.T - mids**2, traj.t0, traj.T)
    scal = np.array([traj.snapshot_at(t).trace_s for t in t_nodes])
    conf = np.array([np.exp(2.0 * traj.state_at(t)[0]) for t in t_mids])
    gauge = None
    if traj.gauge_at(traj.T) is not None:
        ws = [traj.gauge_at(t) for t in t_mids]
        gauge = (_Bilinear(traj.chart, [w.x for w in ws]), _Bilinear(traj.chart, [w.y for w in ws]))
    return CurveFields(traj.chart, s, s_weights(s), _Bilinear(traj.chart, scal), _Bilinear(traj.chart, conf),
                       gauge, tau1)


def static_fields(m, nodes=NODES):
    """Fields for the plain energy ``1/2 int_0^1 |gamma'|^2_g ds`` of a fixed metric (``S = 0``)."""
    s = np.linspace(0.0, 1.0, nodes + 1)
    zero = np.zeros((1,) + m.chart.shape)
    return CurveFields(m.chart, s, np.zeros(nodes + 1), _Bilinear(m.chart, np.repeat(zero, nodes + 1, 0)),
                       _Bilinear(m.chart, np.repeat(m.conf[None], nodes, 0)), None, 1.0)


# ---------------------------------------------------------------------------
# length functional on batches of curves

def curve_length(cf, P, grad=False):
    """L for curves ``P`` of shape ``(B, nodes + 1, 2)``; optionally its gradient in ``P``."""
    B, n1, _ = P.shape
    M = n1 - 1
    ds = np.diff(cf.s)
    node_idx = np.broadcast_to(np.arange(n1), (B, n1))
    mid_idx = np.broadcast_to(np.arange(M), (B, M))
    px, py = P[..., 0], P[..., 1]
    if grad:
        sv, sgx, sgy = cf.scalar(node_idx, px, py, grad=True)
    else:
        sv = cf.scalar(node_idx, px, py)
    pot = sv @ cf.weights
    qx = 0.5 * (px[:, 1:] + px[:, :-1])
    qy = 0.5 * (py[:, 1:] + py[:, :-1])
    vx = np.diff(px, axis=1) / ds
    vy = np.diff(py, axis=1) / ds
    smid = 0.5 * (cf.s[1:] + cf.s[:-1])
    if cf.gauge is not None:
        if grad:
            wx, wxx, wxy = cf.gauge[0](mid_idx, qx, qy, grad=True)
            wy, wyx, wyy = cf.gauge[1](mid_idx, qx, qy, grad=True)
        else:
            wx = cf.gauge[0](mid_idx, qx, qy)
            wy = cf.gauge[1](mid_idx, qx, qy)
        vx = vx - 2.0 * smid * wx
        vy = vy - 2.0 * smid * wy
    if grad:
        e, ex, ey = cf.conf(mid_idx, qx, qy, grad=True)
    else:
        e = cf.conf(mid_idx, qx, qy)
    speed2 = vx * vx + vy * vy
    kin = 0.5 * np.sum(e * speed2 * ds, axis=1)
    total = pot + kin
    if not grad:
        return total
    g = np.zeros_like(P)
    g[..., 0] += sgx * cf.weights
    g[..., 1] += sgy * cf.weights
    # derivative through the midpoint position
    mx = 0.5 * ex * speed2 * ds
    my = 0.5 * ey * speed2 * ds
    if cf.gauge is not None:
        cx = -2.0 * smid * e * ds
        mx = mx + cx * (vx * wxx + vy * wyx)
        my = my + cx * (vx * wxy + vy * wyy)
    g[:, 1:, 0] += 0.5 * mx
    g[:, :-1, 0] += 0.5 * mx
    g[:, 1:, 1] += 0.5 * my
    g[:, :-1, 1] += 0.5 * my
    # derivative through the velocity
    kx = e * vx
    ky = e * vy
    g[:, 1:, 0] += kx
    g[:, :-1, 0] -= kx
    g[:, 1:, 1] += ky
    g[:, :-1, 1] -= ky
    return total, g


def straight_curves(cf, start, ends):
    """Constant-speed-in-``s`` segments from ``start`` to each row of ``ends``."""
    frac = (cf.s / cf.s[-1])[None, :, None]
    start = np.asarray(start, dtype=float)[None, None, :]
    return start + frac * (np.asarray(ends, dtype=float)[:, None, :] - start)


def l_length(traj, curve, tau1=None):
    """L-length of one curve given as ``(nodes + 1, 2)`` chart positions on the uniform ``s`` grid."""
    curve = np.asarray(curve, dtype=float)
    if curve.ndim != 2 or curve.shape[1] != 2 or len(curve) < 2:
        raise ValueError("curve must have shape (nodes + 1, 2)")
    tau1 = traj.T - traj.t0 if tau1 is None else tau1
    cf = curve_fields(traj, tau1, len(curve) - 1)
    return float(curve_length(cf, curve[None])[0])


@dataclass
class OptimizeResult:
    value: np.ndarray
    curves: np.ndarray = field(repr=False)
    initial: np.ndarray = field(repr=False)
    converged: bool
    iterations: int
    message: str


def optimize_curves(cf, P0, max_iter=MAX_ITER, gtol=1e-9):
    """Minimize L over interior nodes of every curve in the batch at once (the sum is separable)."""
    B, n1, _ = P0.shape
    interior = P0[:, 1:-1, :].copy()
    shape = interior.shape
    P = P0.copy()
    scale = float(cf.s[-1])

    def fun(z):
        P[:, 1:-1, :] = z.reshape(shape)
        val, g = curve_length(cf, P, grad=True)
        return float(val.sum()), g[:, 1:-1, :].ravel()

    init = curve_length(cf, P0)
    if n1 <= 2:
        return OptimizeResult(init, P0, init, True, 0, "no interior nodes")
    res = minimize(fun, interior.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "maxcor": 20, "ftol": FTOL, "gtol": gtol * scale})
    P[:, 1:-1, :] = res.x.reshape(shape)
    val, g = curve_length(cf, P, grad=True)
    worst = float(np.abs(g[:, 1:-1, :]).max()) if n1 > 2 else 0.0
    ok = bool(res.success) or worst <= 1e-6 * max(1.0, scale)
    return OptimizeResult(val, P.copy(), init, ok, int(res.nit), str(res.message))


def lift_candidates(chart, y, x):
    """The nine lifts ``x + (i lx, j ly)`` around the nearest image of each endpoint, shape ``(N, 9, 2)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    base = x - y
    base[:, 0] = (base[:, 0] + 0.5 * chart.lx) % chart.lx - 0.5 * chart.lx
    base[:, 1] = (base[:, 1] + 0.5 * chart.ly) % chart.ly - 0.5 * chart.ly
    offs = np.array([(i * chart.lx, j * chart.ly) for i in (-1, 0, 1) for j in (-1, 0, 1)])
    return y[None, None, :] + base[:, None, :] + offs[None, :, :]


@dataclass
class DistanceResult:
    """Minimal L (and the reduced distance) for a set of endpoints."""

    points: np.ndarray
    length: np.ndarray
    straight: np.ndarray
    tau1: float
    converged: bool
    starts: int
    optimized: int = 0

    @property
    def ell(self):
        return self.length / (2.0 * math.sqrt(self.tau1))


def length_lower_bound(cf, y, ends):
    """A lower bound for L over all curves to ``ends`` (Cauchy-Schwarz on the kinetic sum).

    Bilinear interpolation never leaves the range of the grid values, so the
    grid minima of ``S`` and ``exp(2u)`` and the maximum of ``|W|`` bound the
    discrete functional for every curve.
    """
    s1 = float(cf.s[-1])
    disp = np.linalg.norm(np.asarray(ends, dtype=float) - np.asarray(y, dtype=float), axis=-1)
    drift = 0.0
    if cf.gauge is not None:
        drift = float(np.max(np.hypot(cf.gauge[0].f, cf.gauge[1].f))) * s1 * s1
    pot = float(cf.scalar.f.min()) * float(cf.weights.sum())
    return pot + 0.5 * float(cf.conf.f.min()) * np.maximum(disp - drift, 0.0) ** 2 / s1


def minimal_length(cf, y, points, starts=STARTS, max_iter=MAX_ITER):
    """Minimize over the ``starts`` best straight lifts per endpoint and keep the least value.

    A lift whose lower bound already exceeds the best value found is skipped.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cands = lift_candidates(cf.chart, y, points)
    N = len(points)
    straight = np.empty((N, LIFTS))
    for j in range(LIFTS):
        straight[:, j] = curve_length(cf, straight_curves(cf, y, cands[:, j, :]))
    order = np.argsort(straight, axis=1)[:, :starts]
    best = np.full(N, np.inf)
    ok = True
    optimized = 0
    for r in range(order.shape[1]):
        ends = cands[np.arange(N), order[:, r], :]
        todo = np.nonzero(length_lower_bound(cf, y, ends) < best)[0]
        if len(todo) == 0:
            continue
        res = optimize_curves(cf, straight_curves(cf, y, ends[todo]), max_iter)
        ok = ok and res.converged
        optimized += len(todo)
        best[todo] = np.minimum(best[todo], np.minimum(res.value, res.initial))
    return DistanceResult(points, best, straight.min(axis=1), cf.tau1, ok, order.shape[1], optimized)


def grid_points(chart, indices=None):
    X, Y = chart.mesh
    if indices is None:
        return np.column_stack([X.ravel(), Y.ravel()])
    idx = np.asarray(indices)
    return np.column_stack([X[idx[:, 0], idx[:, 1]], Y[idx[:, 0], idx[:, 1]]])


def basepoint_coords(chart, basepoint):
    i, j = basepoint
    return np.array([chart.x[i], chart.y[j]])


def reduced_distance(traj, x, tau1, basepoint, nodes=NODES, starts=STARTS):
    """``ell(x, tau_1) = L_min / (2 sqrt(tau_1))`` for one chart point ``x``.

    Raises ConvergenceError (carrying the best value, an upper bound only) if
    the optimizer stops early.
    """
    cf = curve_fields(traj, tau1, nodes)
    res = minimal_length(cf, basepoint_coords(traj.chart, basepoint), [x], starts)
    ell = float(res.ell[0])
    if not res.converged:
        raise ConvergenceError(f"curve optimization for x={tuple(x)} did not converge", ell, math.nan)
    return ell


def reduced_distance_field(traj, tau1, basepoint, nodes=NODES, starts=STARTS):
    """``ell`` on every grid point at ``tau_1`` (one batched optimization per lift rank)."""
    cf = curve_fields(traj, tau1, nodes)
    res = minimal_length(cf, basepoint_coords(traj.chart, basepoint), grid_points(traj.chart), starts)
    if not res.converged:
        log.warning("curve optimization at tau=%g stopped early; ell is an upper bound", tau1)
    return res.ell.reshape(traj.chart.shape), res


def distance_sq_field(m, basepoint, nodes=NODES, starts=STARTS):
    """Squared Riemannian distance of a fixed metric from a grid basepoint, by minimizing curve energy."""
    cf = static_fields(m, nodes)
    res = minimal_length(cf, basepoint_coords(m.chart, basepoint), grid_points(m.chart), starts)
    return (2.0 * res.length).reshape(m.chart.shape), res


def reduced_volume(traj, tau, ell):
    """``int (4 pi tau)^{-n/2} exp(-ell) dmu`` on the metric at ``T - tau``."""
    m = traj.metric_at(traj.T - tau, method="cubic")
    v = geo.integrate(m, (4.0 * math.pi * tau) ** (-0.5 * N_DIM) * np.exp(-ell))
    if not v > 0:
        raise FlowHarnackError(f"reduced volume {v} is not positive")
    return v


# ---------------------------------------------------------------------------
# comparisons

def sandwich_constants(bounds):
    """``(k_lo, k_hi)`` with ``-k_lo g <= alpha <= k_hi g`` over the run."""
    return max(bounds.k2, 0.0), max(bounds.alpha_upper, 0.0)


def tol_cmp(chart, dtau, magnitude):
    return 10.0 * (chart.hmin**2 + dtau) * magnitude


@dataclass
class SandwichReport:
    tau: float
    lower_margin: float
    upper_margin: float
    tol: float

    @property
    def passed(self):
        return self.lower_margin >= -self.tol and self.upper_margin >= -self.tol

    def to_record(self):
        return {"tau": self.tau, "lower_margin": self.lower_margin, "upper_margin": self.upper_margin,
                "tol": self.tol, "passed": self.passed}


def check_sandwich(tau, ell, d2, bounds, chart, dtau):
    """``exp(-2 k_lo tau) d^2 - (4 k_lo n/3) tau^2 <= 4 tau ell <= exp(2 k_hi tau) d^2 + (4 k_hi n/3) tau^2``."""
    k_lo, k_hi = sandwich_constants(bounds)
    big_l = 4.0 * tau * ell
    lower = math.exp(-2.0 * k_lo * tau) * d2 - 4.0 * k_lo * N_DIM / 3.0 * tau**2
    upper = math.exp(2.0 * k_hi * tau) * d2 + 4.0 * k_hi * N_DIM / 3.0 * tau**2
    tol = tol_cmp(chart, dtau, float(np.max(np.abs(big_l))))
    return SandwichReport(tau, float(np.min(big_l - lower)), float(np.min(upper - big_l)), tol)


@dataclass
class ComparisonReport:
    tau: float
    max_excess: float
    tol: float

    @property
    def passed(self):
        return self.max_excess <= self.tol

    def to_record(self):
        return {"tau": self.tau, "max_excess": self.max_excess, "tol": self.tol, "passed": self.passed}


def check_h_le_ell(ker, tau, ell, floor=1e-8):
    """``max (h - ell)`` over resolved points of the kernel slice nearest to ``tau``."""
    k = ker.traj.index(ker.traj.T - tau)
    keep = ker.resolved(k, floor)
    h = ker.h(k)
    excess = float(np.max(np.where(keep, h - ell, -np.inf)))
    mag = float(np.max(np.abs(np.where(keep, ell, 0.0))))
    return ComparisonReport(tau, excess, tol_cmp(ker.traj.chart, ker.traj.store_dt, mag))


def composite(tau, ell):
    return (4.0 * math.pi * tau) ** (-0.5 * N_DIM) * np.exp(-ell)


def check_subsolution(traj, taus, ells, scheme="fd4"):
    """``Box*`` of ``(4 pi tau)^{-n/2} exp(-ell)`` at the interior samples.

    ``Box* = d/dtau + W.grad - lap + S`` in the chart.  The Laplacian uses a
    local stencil because ``ell`` has a kink along the cut locus.
    """
    taus = np.asarray(taus, dtype=float)
    if len(taus) < 3:
        raise ValueError("need at least three tau samples")
    chart = traj.chart.with_scheme(scheme)
    psi = [composite(t, e) for t, e in zip(taus, ells)]
    out = []
    for i in range(1, len(taus) - 1):
        t = traj.T - taus[i]
        u, _ = traj.state_at(t)
        m = geo.ConformalMetric(chart, u)
        a, b = taus[i - 1], taus[i + 1]
        c = taus[i]
        # three-point derivative on a possibly uneven tau grid
        d_tau = (psi[i + 1] * (c - a) / ((b - a) * (b - c)) - psi[i - 1] * (b - c) / ((b - a) * (c - a))
                 + psi[i] * (b + a - 2 * c) / ((b - c) * (c - a)))
        val = d_tau - geo.laplace_beltrami(m, psi[i]) + traj.snapshot_at(t).trace_s * psi[i]
        w = traj.gauge_at(t)
        if w is not None:
            val = val + geo.directional(m, w, psi[i])
        dtau = max(b - c, c - a)
        tol = 10.0 * (chart.hmin**2 + dtau) * float(np.max(np.abs(psi[i]))) / taus[i]
        out.append(ComparisonReport(float(c), float(np.max(val)), float(tol)))
    return out
