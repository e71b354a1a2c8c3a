"""The entropy functional ``W(g, tau, h)``, its infimum ``mu`` and ``upsilon``.

Densities are written ``u = (4 pi tau)^{-n/2} exp(-h) = w^2``.  In terms of
``w`` the functional is

    W = int [tau (4 |grad w|^2 + S w^2) - w^2 log w^2 - c w^2] dmu,
    c = (n/2) log(4 pi tau) + n,

and its discrete form uses ``4 int |grad w|^2 = -4 int w lap w`` with the same
compact Laplacian as everything else, so the discrete stationarity condition is

    tau (-4 lap w / w + S) - log w^2 - c - 1 = lambda,   mu = lambda + 1,

which is ``tau (2 lap h - |grad h|^2 + S) + h - n = mu`` written without
differentiating ``h``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from . import geometry as geo
from .errors import ConvergenceError, NormalizationError

log = logging.getLogger(__name__)

N_DIM = 2
TOL_NORM = 1e-6
W_FLOOR = 1e-150
MONO_REL = 1e-4


def _c(tau):
    return 0.5 * N_DIM * math.log(4.0 * math.pi * tau) + N_DIM


def density_from_h(tau, h):
    return (4.0 * math.pi * tau) ** (-0.5 * N_DIM) * np.exp(-np.asarray(h, dtype=float))


def w_of_density(m, tau, u, s=None, tol_norm=TOL_NORM, keep=None):
    """``W`` for a density ``u`` (``tau |grad h|^2 u = tau |grad u|^2 / u``).

    ``keep`` optionally restricts the integrand to a mask (points outside
    contribute zero).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    u = np.asarray(u, dtype=float)
    m.check(u)
    mass = geo.integrate(m, u)
    if abs(mass - 1.0) > tol_norm:
        raise NormalizationError(mass, tol_norm)
    pos = u > 0
    if keep is not None:
        pos = pos & keep
    safe = np.where(pos, u, 1.0)
    grad_sq = geo.grad_norm_sq(m, u)
    h = -np.log(safe) - 0.5 * N_DIM * math.log(4.0 * math.pi * tau)
    s = np.zeros_like(u) if s is None else s
    integrand = np.where(pos, tau * (grad_sq / safe + s * u) + (h - N_DIM) * u, 0.0)
    return geo.integrate(m, integrand)


def w_functional(m, tau, h, s=None, tol_norm=TOL_NORM):
    """``int (tau (|grad h|^2 + S) + h - n) (4 pi tau)^{-n/2} exp(-h) dmu``."""
    h = np.asarray(h, dtype=float)
    m.check(h)
    return w_of_density(m, tau, density_from_h(tau, h), s, tol_norm)


# ---------------------------------------------------------------------------
# minimization

def _energy(m, tau, s, w):
    w2 = w * w
    lap = geo.laplace_beltrami(m, w)
    logw2 = np.log(np.maximum(w2, W_FLOOR))
    dens = tau * (-4.0 * w * lap + s * w2) - w2 * logw2 - _c(tau) * w2
    return geo.integrate(m, dens)


def _gradient(m, tau, s, w):
    """Derivative of the energy with respect to ``w`` in the ``dmu`` inner product."""
    logw2 = np.log(np.maximum(w * w, W_FLOOR))
    return 2.0 * (tau * (-4.0 * geo.laplace_beltrami(m, w) + s * w) - w * logw2 - (1.0 + _c(tau)) * w)


def _normalize(m, w):
    return w / math.sqrt(geo.integrate(m, w * w))


def el_residual(m, tau, s, w, mu):
    """Sup-norm of ``tau (-4 lap w / w + S) - log w^2 - c - mu`` (the stationarity condition)."""
    logw2 = np.log(np.maximum(w * w, W_FLOOR))
    lhs = tau * (-4.0 * geo.laplace_beltrami(m, w) / w + s) - logw2 - _c(tau)
    return float(np.max(np.abs(lhs - mu)))


class _Preconditioner:
    """``(8 tau (-lap0) + beta)^{-1}`` applied in Fourier space, divided by the conformal weight."""

    def __init__(self, m, tau, beta):
        c = m.chart
        sym = -(c.second_symbol(0)[:, None] + c.second_symbol(1)[None, :])
        self.den = 8.0 * tau * sym + beta * float(np.mean(m.conf))
        self.conf = m.conf

    def __call__(self, g):
        return np.fft.ifft2(np.fft.fft2(g * self.conf) / self.den).real


@dataclass
class MuResult:
    mu: float
    w: np.ndarray = field(repr=False)
    tau: float
    residual: float
    iterations: int
    newton_steps: int
    converged: bool
    spread: float = 0.0

    def h(self):
        return -np.log(np.maximum(self.w**2, W_FLOOR)) - 0.5 * N_DIM * math.log(4.0 * math.pi * self.tau)


def _descend(m, tau, s, w, max_iter, rel_stall=1e-10, window=20, tol_el=None):
    prec = _Preconditioner(m, tau, beta=2.0)
    e = _energy(m, tau, s, w)
    history = [e]
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        g = _gradient(m, tau, s, w)
        d = prec(g)
        pw = prec(w)
        d = d - geo.integrate(m, d * w) / geo.integrate(m, pw * w) * pw
        slope = -geo.integrate(m, g * d)
        if slope >= 0:
            break
        step = min(1.0, 2.0 * step)
        while True:
            trial = _normalize(m, w - step * d)
            e_new = _energy(m, tau, s, trial)
            if e_new <= e + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        w, e = trial, e_new
        history.append(e)
        if len(history) > window:
            drop = history[-window - 1] - history[-1]
            if drop <= rel_stall * max(1.0, abs(e)):
                if tol_el is None or el_residual(m, tau, s, w, e) <= tol_el:
                    break
                if drop <= 1e-15 * max(1.0, abs(e)):
                    break
    return w, e, it


def _newton(m, tau, s, w, e, tol_el, max_steps=20):
    """Newton polish of the stationarity system in ``(w, lambda)`` with GMRES."""
    n = w.size
    shape = w.shape
    prec = _Preconditioner(m, tau, beta=2.0)
    lam = e - 1.0
    steps = 0
    for steps in range(1, max_steps + 1):
        logw2 = np.log(np.maximum(w * w, W_FLOOR))
        r = tau * (-4.0 * geo.laplace_beltrami(m, w) + s * w) - w * logw2 - (1.0 + _c(tau) + lam) * w
        r_norm = 1.0 - geo.integrate(m, w * w)
        if el_residual(m, tau, s, w, _energy(m, tau, s, w)) <= tol_el and abs(r_norm) < 1e-13:
            break
        diag = s * tau - logw2 - 2.0 - (1.0 + _c(tau) + lam)
        vol = m.volume_element

        def matvec(x, w=w, diag=diag):
            dw = x[:n].reshape(shape)
            dl = x[n]
            top = -4.0 * tau * geo.laplace_beltrami(m, dw) + diag * dw - dl * w
            bottom = 2.0 * float(np.sum(w * dw * vol))
            return np.concatenate([top.ravel(), [bottom]])

        def psolve(x):
            top = 0.5 * prec(x[:n].reshape(shape))
            return np.concatenate([top.ravel(), [x[n]]])

        A = LinearOperator((n + 1, n + 1), matvec=matvec, dtype=float)
        M = LinearOperator((n + 1, n + 1), matvec=psolve, dtype=float)
        rhs = np.concatenate([-r.ravel(), [r_norm]])
        sol, _ = gmres(A, rhs, M=M, rtol=1e-12, atol=0.0, restart=80, maxiter=20)
        w_new = w + sol[:n].reshape(shape)
        if np.any(w_new <= 0):
            w_new = np.maximum(w_new, 0.5 * w)
        w = _normalize(m, w_new)
        lam = lam + sol[n]
    return w, _energy(m, tau, s, w), steps


def bump_start(m, tau, s=None):
    """Normalized Gaussian-like density of scale ``sqrt(tau)`` centred where ``S`` is smallest."""
    s = m.chart.zeros() if s is None else s
    i, j = np.unravel_index(int(np.argmin(s)), s.shape)
    point = (m.chart.x[i], m.chart.y[j])
    d2 = geo.torus_distance_sq(m.chart, point) * m.conf[i, j]
    u = np.exp(-d2 / (4.0 * tau))
    return u / geo.integrate(m, u)


def _single(m, tau, s, w, max_iter, tol_el, newton):
    w = _normalize(m, w)
    w, e, iters = _descend(m, tau, s, w, max_iter)
    tol = 1e-5 * (1.0 + abs(e)) if tol_el is None else tol_el
    steps = 0
    if newton and el_residual(m, tau, s, w, e) > tol:
        w, e, steps = _newton(m, tau, s, w, e, tol)
    res = el_residual(m, tau, s, w, e)
    tol = 1e-5 * (1.0 + abs(e)) if tol_el is None else tol_el
    return MuResult(e, w, tau, res, iters, steps, res <= tol)


def mu_minimize(m, tau, s=None, init=None, seed=0, restarts=1, max_iter=5000, tol_el=None, newton=True,
                noise=1e-2):
    """``mu(g, tau)`` and its minimizer.

    Starts from ``init`` (a positive density) when given, otherwise from a
    localized bump, and additionally from ``restarts`` perturbed constants (the
    constant and stripe-shaped profiles are critical points, so a single
    start can stall on a saddle).  The lowest converged value wins and the
    spread over starts is kept on the result.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = m.chart.zeros() if s is None else np.asarray(s, dtype=float)
    rng = np.random.default_rng(seed)
    first = bump_start(m, tau, s) if init is None else np.maximum(np.asarray(init, dtype=float), 0.0)
    starts = [np.sqrt(first) + 1e-12]
    for _ in range(restarts):
        starts.append(np.ones(m.chart.shape) * (1.0 + noise * _smooth_noise(m.chart, rng)))
    results = [_single(m, tau, s, w, max_iter, tol_el, newton) for w in starts]
    done = [r for r in results if r.converged]
    best = min(done or results, key=lambda r: r.mu)
    best.spread = float(max(r.mu for r in done) - best.mu) if done else math.nan
    if not best.converged:
        raise ConvergenceError(
            f"mu minimization at tau={tau:g} stopped with residual {best.residual:.3e}", best, best.residual
        )
    return best


def _smooth_noise(chart, rng, modes=4):
    X, Y = chart.mesh
    out = np.zeros(chart.shape)
    for _ in range(modes):
        kx, ky = rng.integers(-3, 4, size=2)
        out += rng.normal() * np.cos(geo.TWO_PI * (kx * X / chart.lx + ky * Y / chart.ly) + rng.uniform(0, geo.TWO_PI))
    return out / modes


def constant_candidate_w(m, tau, s=None):
    """``W`` of the normalized constant density."""
    return w_of_density(m, tau, np.full(m.chart.shape, 1.0 / m.volume), s)


def log_tau_grid(lo, hi, per_decade=16):
    count = max(2, int(math.ceil(per_decade * math.log10(hi / lo))) + 1)
    return np.geomspace(lo, hi, count)


def upsilon(m, tau_grid, s=None, seed=0):
    """Minimum of ``mu`` over a tau grid (an upper estimate of the infimum over all tau)."""
    best, rows = math.inf, []
    for tau in sorted(tau_grid):
        res = mu_minimize(m, tau, s, seed=seed)
        rows.append((float(tau), res.mu))
        best = min(best, res.mu)
    return best, rows


# ---------------------------------------------------------------------------
# monotonicity along flows

@dataclass
class MonotoneReport:
    times: np.ndarray
    values: np.ndarray
    tol_mono: float
    note: str = ""

    @property
    def increments(self):
        return np.diff(self.values)

    @property
    def monotone(self):
        return bool(np.all(self.increments >= -self.tol_mono))

    def to_record(self):
        return {
            "first": float(self.values[0]),
            "last": float(self.values[-1]),
            "min_increment": float(self.increments.min()) if len(self.values) > 1 else 0.0,
            "tol_mono": self.tol_mono,
            "monotone": self.monotone,
            "note": self.note,
        }


def check_w_monotone(ker, indices=None, tol_norm=TOL_NORM):
    """``W(g(t), T - t, h(t))`` with ``h`` carried by the conjugate solution, by increasing t.

    Every positive grid value enters the integral; the tail points are tiny
    and masking them would bias the gradient term.
    """
    from .harnack import probe_indices

    ks = sorted(probe_indices(ker, clean=True) if indices is None else indices)
    traj = ker.traj
    vals = []
    for k in ks:
        m = traj.metric(k)
        vals.append(
            w_of_density(m, ker.tau(k), ker.u(k), traj.snapshot(k).trace_s, tol_norm)
        )
    vals = np.array(vals)
    return MonotoneReport(
        traj.times[ks], vals, MONO_REL * float(np.max(np.abs(vals))),
        note="h evolves by the conjugate heat equation",
    )


def check_mu_monotone(traj, tau_of_t, indices, seed=0):
    """``mu(g(t_k), tau(t_k))`` at the given stored indices, warm-started slice to slice."""
    vals, ws = [], None
    for k in sorted(indices):
        m = traj.metric(k)
        res = mu_minimize(m, tau_of_t(traj.times[k]), traj.snapshot(k).trace_s, init=ws, seed=seed)
        vals.append(res.mu)
        ws = res.w**2
    vals = np.array(vals)
    return MonotoneReport(
        traj.times[sorted(indices)], vals, MONO_REL * float(np.max(np.abs(vals))),
        note="tau decreases as t increases",
    )
