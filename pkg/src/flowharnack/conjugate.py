"""Backward conjugate heat solves and forward heat solves along a stored trajectory.

The conjugate equation ``du/dtau = Delta u - S u`` (``tau = T - t``) is
integrated for the density ``rho = u exp(2 u_c)`` with respect to the flat
chart measure.  In that form it reads

    d rho / d tau = lap0(rho exp(-2 u_c)) - d_k(rho W^k)

so the total mass ``sum(rho) hx hy`` is conserved to rounding and the
discrete pairing with forward heat solutions is exact up to time stepping.
``W`` is the gauge field of the trajectory (zero for conformal models).
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from . import geometry as geo
from .errors import CFLError, PositivityError, TrajectoryRangeError
from .flow import stability_limit

log = logging.getLogger(__name__)

N_BURN = 10
TOL_MASS = 1e-6
TOL_KER = 1e-3
TOL_ASYM = 0.05
# Largest negative excursion, relative to max u, tolerated for spectral
# differentiation after the burn-in (Gibbs ringing of the discrete delta).
SPECTRAL_POS_TOL = 1e-2
# A point counts as resolved only when u dominates the representation noise
# (the most negative value) by this factor.
NOISE_FACTOR = 1e4
# Integral checks start once the relative representation noise is below this.
CLEAN_NOISE = 1e-12


def worker_count(requested=None):
    cap = os.environ.get("FLOWHARNACK_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


class _Field:
    """Metric, gauge field and derived coefficients at one (possibly interpolated) time."""

    def __init__(self, traj, t):
        k = _stored_index(traj, t)
        if k is not None:
            self.metric = traj.metric(k)
            self.w = traj.gauge(k)
        else:
            self.metric = traj.metric_at(t, method="cubic")
            self.w = traj.gauge_at(t)


def _stored_index(traj, t):
    k = int(np.argmin(np.abs(traj.times - t)))
    return k if abs(traj.times[k] - t) <= 1e-12 * max(1.0, traj.T) else None


def _density_rate(fld, rho):
    m = fld.metric
    rate = geo.flat_laplacian(m.chart, rho * m.inv_conf)
    if fld.w is not None:
        rate = rate - geo.dx(m.chart, rho * fld.w.x) - geo.dy(m.chart, rho * fld.w.y)
    return rate


def _heat_rate(fld, phi):
    rate = geo.laplace_beltrami(fld.metric, phi)
    if fld.w is not None:
        rate = rate + geo.directional(fld.metric, fld.w, phi)
    return rate


def _substeps(traj, k0, k1):
    """Number of equal RK4 steps between stored indices, never coarser than the flow step."""
    span = abs(traj.times[k1] - traj.times[k0])
    n = max(1, math.ceil(span / traj.dt - 1e-9))
    limit = min(stability_limit(traj.metric(k0)), stability_limit(traj.metric(k1)))
    if span / n > limit:
        raise CFLError(span / n, limit)
    return n


def _positivity_tol(chart, steps_done, n_burn):
    if chart.scheme == "spectral":
        return math.inf if steps_done < n_burn else SPECTRAL_POS_TOL
    return 0.0


def _check_positive(u, t, tol):
    lo, hi = float(u.min()), float(u.max())
    if not np.all(np.isfinite(u)) or lo < -tol * hi:
        raise PositivityError(t, lo)


class ConjugateSolution:
    """Positive solution of the conjugate heat equation, stored at the trajectory times.

    ``rho[k]`` is the flat-chart density at ``traj.times[k]``; ``u(k)`` is the
    solution itself.
    """

    def __init__(self, traj, rho):
        self.traj = traj
        self.rho = rho

    @property
    def times(self):
        return self.traj.times

    @property
    def T(self):
        return self.traj.T

    def tau(self, k):
        return self.traj.T - float(self.traj.times[k])

    @property
    def taus(self):
        return self.traj.T - self.traj.times

    def index(self, t):
        return self.traj.index(t)

    def u(self, k):
        return self.rho[k] * self.traj.metric(k).inv_conf

    def mass(self, k):
        return float(self.rho[k].sum() * self.traj.chart.cell_area)

    def masses(self):
        return self.rho.sum(axis=(1, 2)) * self.traj.chart.cell_area

    def mass_drift(self):
        masses = self.masses()
        return float(np.max(np.abs(masses - masses[-1])) / abs(masses[-1]))

    def log_u(self, k):
        u = self.u(k)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), np.nan)

    def h(self, k):
        """``-log u - log(4 pi tau)``; NaN where ``u`` is not positive."""
        tau = self.tau(k)
        if tau <= 0:
            raise TrajectoryRangeError("h is undefined at tau = 0")
        return -self.log_u(k) - math.log(4.0 * math.pi * tau)

    def noise(self, k):
        """Most negative value of ``u`` relative to its maximum (zero for positive data)."""
        u = self.u(k)
        return max(0.0, -float(u.min())) / float(u.max())

    def clean_index(self, level=CLEAN_NOISE):
        """Largest stored index (smallest tau > 0) from which on backwards all slices are clean."""
        K = len(self.traj.times) - 1
        best = None
        for k in range(0, K):
            if self.noise(k) > level:
                break
            best = k
        if best is None:
            raise TrajectoryRangeError("no stored slice is free of representation noise")
        return best

    def resolved(self, k, floor=1e-8):
        """Mask of points where ``u`` exceeds ``floor`` times its maximum and the noise level."""
        u = self.u(k)
        top = float(u.max())
        noise = max(0.0, -float(u.min()))
        return u > max(floor * top, NOISE_FACTOR * noise)


class KernelSolution(ConjugateSolution):
    """Conjugate heat kernel based at the grid index ``basepoint`` and time ``T``."""

    def __init__(self, traj, rho, basepoint, n_burn=N_BURN):
        super().__init__(traj, rho)
        self.basepoint = basepoint
        self.n_burn = n_burn
        self.burn_in_diag = float("nan")

    @property
    def y(self):
        c = self.traj.chart
        return (self.basepoint[0] * c.hx, self.basepoint[1] * c.hy)


def _integrate_backward(traj, rho_T, n_burn=N_BURN):
    chart = traj.chart
    K = len(traj.times) - 1
    out = np.empty((K + 1,) + chart.shape)
    out[K] = rho_T
    rho = rho_T.copy()
    steps = 0
    for k in range(K, 0, -1):
        n = _substeps(traj, k - 1, k)
        t_hi, t_lo = float(traj.times[k]), float(traj.times[k - 1])
        dt = (t_hi - t_lo) / n
        fld_hi = _Field(traj, t_hi)
        for i in range(n):
            t = t_hi - i * dt
            fld_mid = _Field(traj, t - 0.5 * dt)
            fld_lo = _Field(traj, t_lo) if i == n - 1 else _Field(traj, t - dt)
            k1 = _density_rate(fld_hi, rho)
            k2 = _density_rate(fld_mid, rho + 0.5 * dt * k1)
            k3 = _density_rate(fld_mid, rho + 0.5 * dt * k2)
            k4 = _density_rate(fld_lo, rho + dt * k3)
            rho = rho + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            steps += 1
            fld_hi = fld_lo
            _check_positive(rho, t - dt, _positivity_tol(chart, steps, n_burn))
        out[k - 1] = rho
    return out


def solve_conjugate(traj, init, normalize=True, n_burn=N_BURN):
    """Integrate the conjugate heat equation from ``init`` at ``t = T`` back to the start."""
    init = np.asarray(init, dtype=float)
    traj.metric(0).check(init)
    if np.any(init < 0) or not np.any(init > 0):
        raise ValueError("initial data must be non-negative and not identically zero")
    m_T = traj.metric(len(traj.times) - 1)
    rho_T = init * m_T.conf
    if normalize:
        rho_T = rho_T / (rho_T.sum() * traj.chart.cell_area)
    return ConjugateSolution(traj, _integrate_backward(traj, rho_T, n_burn))


def solve_kernel(traj, y, n_burn=N_BURN):
    """Conjugate heat kernel based at grid index ``y`` and the final time.

    Starts from the unit-mass discrete delta; ``burn_in_diag`` records
    ``4 pi tau u(y)`` after ``n_burn`` steps as a first sanity signal.
    """
    i, j = (int(y[0]) % traj.chart.nx, int(y[1]) % traj.chart.ny)
    rho_T = traj.chart.zeros()
    rho_T[i, j] = 1.0 / traj.chart.cell_area
    rho = _integrate_backward(traj, rho_T, n_burn)
    ker = KernelSolution(traj, rho, (i, j), n_burn)
    k = len(traj.times) - 1 - n_burn
    if k > 0:
        ker.burn_in_diag = float(4.0 * math.pi * ker.tau(k) * ker.u(k)[i, j])
        if abs(ker.burn_in_diag - 1.0) > 0.5:
            log.warning("kernel at %s: 4 pi tau u(y) = %.3f after burn-in", (i, j), ker.burn_in_diag)
    return ker


def solve_kernels(traj, points, n_burn=N_BURN, workers=None):
    """Independent kernels for several basepoints, solved concurrently."""
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        return list(pool.map(lambda y: solve_kernel(traj, y, n_burn), points))


class ForwardSolution:
    def __init__(self, traj, phi):
        self.traj = traj
        self.phi = phi

    @property
    def times(self):
        return self.traj.times

    def max_series(self):
        return self.phi.max(axis=(1, 2))


def solve_forward(traj, phi0):
    """Heat equation ``dPhi/dt = Delta Phi`` forward from ``phi0`` at ``t = t_0``."""
    phi = np.array(phi0, dtype=float)
    traj.metric(0).check(phi)
    if np.any(phi <= 0):
        raise ValueError("forward initial data must be positive")
    K = len(traj.times) - 1
    out = np.empty((K + 1,) + traj.chart.shape)
    out[0] = phi
    for k in range(K):
        n = _substeps(traj, k, k + 1)
        t_lo, t_hi = float(traj.times[k]), float(traj.times[k + 1])
        dt = (t_hi - t_lo) / n
        fld_lo = _Field(traj, t_lo)
        for i in range(n):
            t = t_lo + i * dt
            fld_mid = _Field(traj, t + 0.5 * dt)
            fld_hi = _Field(traj, t_hi) if i == n - 1 else _Field(traj, t + dt)
            k1 = _heat_rate(fld_lo, phi)
            k2 = _heat_rate(fld_mid, phi + 0.5 * dt * k1)
            k3 = _heat_rate(fld_mid, phi + 0.5 * dt * k2)
            k4 = _heat_rate(fld_hi, phi + dt * k3)
            phi = phi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            fld_lo = fld_hi
            if not np.all(np.isfinite(phi)) or phi.min() <= 0:
                raise PositivityError(t + dt, float(phi.min()))
        out[k + 1] = phi
    return ForwardSolution(traj, out)


# ---------------------------------------------------------------------------
# oracles and asymptotics

def image_sum_kernel(chart, y, tau, n=2):
    """Flat-torus heat kernel as a sum of Euclidean Gaussians over lattice translates."""
    X, Y = chart.mesh
    reach = math.sqrt(60.0 * tau)
    mx = int(math.ceil(reach / chart.lx)) + 1
    my = int(math.ceil(reach / chart.ly)) + 1
    out = np.zeros(chart.shape)
    for a in range(-mx, mx + 1):
        for b in range(-my, my + 1):
            r2 = (X - y[0] - a * chart.lx) ** 2 + (Y - y[1] - b * chart.ly) ** 2
            out += np.exp(-r2 / (4.0 * tau))
    return out / (4.0 * math.pi * tau) ** (n / 2)


def image_tail(chart, tau):
    """Relative size of the nearest periodic image at the basepoint."""
    lmin = min(chart.lx, chart.ly)
    return math.exp(-(lmin**2) / (4.0 * tau))


def grid_distance(m, source):
    """Metric distance from a grid index over the 8-neighbour graph (first-order accurate)."""
    c = m.chart
    nx, ny = c.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    e = np.exp(m.u)
    rows, cols, vals = [], [], []
    for sx, sy in ((1, 0), (0, 1), (1, 1), (1, -1)):
        nb = np.roll(np.roll(idx, -sx, axis=0), -sy, axis=1)
        enb = np.roll(np.roll(e, -sx, axis=0), -sy, axis=1)
        length = math.hypot(sx * c.hx, sy * c.hy) * 0.5 * (e + enb)
        rows.append(idx.ravel())
        cols.append(nb.ravel())
        vals.append(length.ravel())
    graph = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nx * ny, nx * ny)
    ).tocsr()
    d = dijkstra(graph, directed=False, indices=int(idx[source]))
    return d.reshape(nx, ny)


def basepoint_distance_sq(traj, basepoint, flat=None):
    """``d_T(., y)^2`` on the final metric: exact on flat metrics, graph distance otherwise."""
    m = traj.metric(len(traj.times) - 1)
    if flat is None:
        flat = bool(np.ptp(m.u) < 1e-14)
    c = traj.chart
    if flat:
        y = (basepoint[0] * c.hx, basepoint[1] * c.hy)
        return geo.torus_distance_sq(c, y) * float(np.exp(2.0 * m.u.flat[0]))
    return grid_distance(m, basepoint) ** 2


@dataclass
class AsymptoticsReport:
    tau: float
    max_ratio_error: float
    diag_ratio: float
    radius: float
    tol: float
    passed: bool
    exact_distance: bool

    def to_record(self):
        return dict(self.__dict__)


def check_asymptotics(ker, tau_probe, radius=None, tol=TOL_ASYM, d2=None):
    """Leading-order small-time check ``H (4 pi tau) exp(d_T^2 / 4 tau) ~ 1`` on a disc around ``y``."""
    traj = ker.traj
    k = int(np.argmin(np.abs(ker.taus - tau_probe)))
    tau = ker.tau(k)
    if len(traj.times) - 1 - k < ker.n_burn:
        raise TrajectoryRangeError(
            f"tau_probe={tau_probe:g} is within the {ker.n_burn}-step burn-in of the kernel solve"
        )
    m_T = traj.metric(len(traj.times) - 1)
    flat = bool(np.ptp(m_T.u) < 1e-14) and traj.model.tag == "Static"
    if d2 is None:
        d2 = basepoint_distance_sq(traj, ker.basepoint, flat=flat)
    if radius is None:
        radius = 2.0 * math.sqrt(tau)
    disc = d2 <= radius**2
    ratio = ker.u(k) * 4.0 * math.pi * tau * np.exp(d2 / (4.0 * tau))
    err = float(np.max(np.abs(ratio[disc] - 1.0)))
    diag = float(ratio[ker.basepoint])
    return AsymptoticsReport(tau, err, diag, radius, tol, err <= tol, flat)


def diagonal_trend(ker, taus):
    """``|4 pi tau H(y, y) - 1|`` at each probe, smallest tau first."""
    out = []
    for tau in sorted(taus):
        k = int(np.argmin(np.abs(ker.taus - tau)))
        val = 4.0 * math.pi * ker.tau(k) * ker.u(k)[ker.basepoint]
        out.append((ker.tau(k), float(abs(val - 1.0))))
    return out


def kernel_oracle_error(ker, tau):
    """Relative sup error of a flat-torus kernel against the image sum at ``tau``."""
    k = int(np.argmin(np.abs(ker.taus - tau)))
    exact = image_sum_kernel(ker.traj.chart, ker.y, ker.tau(k))
    return float(np.max(np.abs(ker.u(k) - exact)) / np.max(exact)), ker.tau(k)
