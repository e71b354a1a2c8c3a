"""Discrete differential geometry of conformally flat metrics on a periodic 2-torus.

A metric is stored by its conformal factor ``u`` so that ``g = exp(2u) (dx^2 + dy^2)``.
Scalar fields are plain ``(nx, ny)`` arrays with axis 0 along x.  Vector fields
hold *covariant* (one-form) components in the flat chart, so that
``|V|^2_g = exp(-2u) (V_x^2 + V_y^2)``; the gauge field of the flow engine is
the only contravariant field and is documented where it is used.

Three spatial schemes share one interface: centered differences of order 2
(``"fd2"``, the default), order 4 (``"fd4"``) and Fourier pseudo-spectral
differentiation (``"spectral"``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ChartMismatchError, DegenerateMetricError

SCHEMES = ("fd2", "fd4", "spectral")
DEGENERACY_FLOOR = 1e-12
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class GridChart:
    nx: int
    ny: int
    lx: float = TWO_PI
    ly: float = TWO_PI
    scheme: str = "fd2"

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if int(n) != n or n < 16 or n % 2:
                raise ValueError(f"grid sizes must be even integers >= 16, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("side lengths must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def hx(self):
        return self.lx / self.nx

    @property
    def hy(self):
        return self.ly / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def hmin(self):
        return min(self.hx, self.hy)

    @cached_property
    def x(self):
        return np.arange(self.nx) * self.hx

    @cached_property
    def y(self):
        return np.arange(self.ny) * self.hy

    @cached_property
    def mesh(self):
        """Coordinate arrays ``(X, Y)`` with ``indexing='ij'``."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def with_scheme(self, scheme):
        return GridChart(self.nx, self.ny, self.lx, self.ly, scheme)

    def refined(self, factor=2):
        return GridChart(self.nx * factor, self.ny * factor, self.lx, self.ly, self.scheme)

    def zeros(self):
        return np.zeros(self.shape)

    # Fourier symbols of the discrete derivative operators, per axis.
    @cached_property
    def _k(self):
        kx = TWO_PI * np.fft.fftfreq(self.nx, d=self.hx)
        ky = TWO_PI * np.fft.fftfreq(self.ny, d=self.hy)
        return kx, ky

    def first_symbol(self, axis):
        """Real ``s(k)`` such that the discrete d/dx acts as multiplication by ``i s(k)``."""
        k = self._k[axis]
        h = (self.hx, self.hy)[axis]
        if self.scheme == "fd2":
            return np.sin(k * h) / h
        if self.scheme == "fd4":
            return (8.0 * np.sin(k * h) - np.sin(2.0 * k * h)) / (6.0 * h)
        s = k.copy()
        s[len(s) // 2] = 0.0
        return s

    def second_symbol(self, axis):
        """Real (non-positive) symbol of the discrete second derivative."""
        k = self._k[axis]
        h = (self.hx, self.hy)[axis]
        if self.scheme == "fd2":
            return -4.0 * np.sin(0.5 * k * h) ** 2 / h**2
        if self.scheme == "fd4":
            return (-2.0 * np.cos(2 * k * h) + 32.0 * np.cos(k * h) - 30.0) / (12.0 * h**2)
        return -(k**2)

    @cached_property
    def max_second_symbol(self):
        """Largest magnitude of the flat Laplacian symbol (sum over both axes)."""
        return float(np.abs(self.second_symbol(0)).max() + np.abs(self.second_symbol(1)).max())


# ---------------------------------------------------------------------------
# flat stencils

def _roll(f, shift, axis):
    return np.roll(f, shift, axis=axis)


def _spectral_derivative(f, chart, axis, order):
    n = f.shape[axis]
    h = (chart.hx, chart.hy)[axis]
    k = TWO_PI * np.fft.rfftfreq(n, d=h)
    fk = np.fft.rfft(f, axis=axis)
    if order == 1:
        mult = 1j * k
        mult[-1] = 0.0
    else:
        mult = -(k**2)
    shape = [1, 1]
    shape[axis] = -1
    return np.fft.irfft(fk * mult.reshape(shape), n=n, axis=axis)


def d1(chart, f, axis):
    """First derivative along ``axis`` (0 = x, 1 = y)."""
    h = (chart.hx, chart.hy)[axis]
    if chart.scheme == "fd2":
        return (_roll(f, -1, axis) - _roll(f, 1, axis)) / (2.0 * h)
    if chart.scheme == "fd4":
        return (
            -_roll(f, -2, axis) + 8.0 * _roll(f, -1, axis) - 8.0 * _roll(f, 1, axis) + _roll(f, 2, axis)
        ) / (12.0 * h)
    return _spectral_derivative(f, chart, axis, 1)


def d2(chart, f, axis):
    """Compact second derivative along ``axis``."""
    h = (chart.hx, chart.hy)[axis]
    if chart.scheme == "fd2":
        return (_roll(f, -1, axis) - 2.0 * f + _roll(f, 1, axis)) / h**2
    if chart.scheme == "fd4":
        return (
            -_roll(f, -2, axis)
            + 16.0 * _roll(f, -1, axis)
            - 30.0 * f
            + 16.0 * _roll(f, 1, axis)
            - _roll(f, 2, axis)
        ) / (12.0 * h**2)
    return _spectral_derivative(f, chart, axis, 2)


def dx(chart, f):
    return d1(chart, f, 0)


def dy(chart, f):
    return d1(chart, f, 1)


def dxy(chart, f):
    return d1(chart, d1(chart, f, 0), 1)


def flat_laplacian(chart, f):
    return d2(chart, f, 0) + d2(chart, f, 1)


# ---------------------------------------------------------------------------
# field containers

class Vector(NamedTuple):
    """Two component arrays in the flat chart."""

    x: np.ndarray
    y: np.ndarray

    def scale(self, c):
        return Vector(c * self.x, c * self.y)

    def plus(self, other):
        return Vector(self.x + other.x, self.y + other.y)


class SymTensor(NamedTuple):
    """Symmetric 2-tensor with lower indices, components (xx, xy, yy)."""

    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    def scale(self, c):
        return SymTensor(c * self.xx, c * self.xy, c * self.yy)

    def plus(self, other):
        return SymTensor(self.xx + other.xx, self.xy + other.xy, self.yy + other.yy)

    def minus(self, other):
        return SymTensor(self.xx - other.xx, self.xy - other.xy, self.yy - other.yy)


def zero_vector(chart):
    return Vector(chart.zeros(), chart.zeros())


def zero_tensor(chart):
    return SymTensor(chart.zeros(), chart.zeros(), chart.zeros())


@dataclass(frozen=True, eq=False)
class ConformalMetric:
    """``g = exp(2u) delta`` on ``chart``."""

    chart: GridChart
    u: np.ndarray = field(repr=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.shape != self.chart.shape:
            raise ChartMismatchError(f"conformal factor shape {u.shape} != grid {self.chart.shape}")
        if not np.all(np.isfinite(u)):
            raise DegenerateMetricError("conformal factor is not finite")
        if np.exp(2.0 * u.min()) < DEGENERACY_FLOOR:
            raise DegenerateMetricError(
                f"conformal factor exp(2u) drops to {np.exp(2.0 * u.min()):.3e} < {DEGENERACY_FLOOR:g}"
            )
        object.__setattr__(self, "u", u)

    @classmethod
    def flat(cls, chart):
        return cls(chart, chart.zeros())

    @cached_property
    def conf(self):
        """``exp(2u)``, the metric coefficient."""
        return np.exp(2.0 * self.u)

    @cached_property
    def inv_conf(self):
        return np.exp(-2.0 * self.u)

    @cached_property
    def du(self):
        return Vector(dx(self.chart, self.u), dy(self.chart, self.u))

    @cached_property
    def volume_element(self):
        return self.conf * self.chart.cell_area

    @cached_property
    def volume(self):
        return float(self.volume_element.sum())

    def tensor(self):
        return SymTensor(self.conf, np.zeros_like(self.conf), self.conf)

    def scaled(self, c):
        """The metric ``c g``."""
        return ConformalMetric(self.chart, self.u + 0.5 * np.log(c))

    def check(self, *fields):
        for f in fields:
            arrays = f if isinstance(f, tuple) else (f,)
            for a in arrays:
                if np.shape(a) != self.chart.shape:
                    raise ChartMismatchError(
                        f"field of shape {np.shape(a)} used with grid {self.chart.shape}"
                    )


# ---------------------------------------------------------------------------
# operators

def laplace_beltrami(m, f):
    m.check(f)
    return m.inv_conf * flat_laplacian(m.chart, f)


def gradient(m, f):
    """Differential of ``f`` (covariant components)."""
    m.check(f)
    return Vector(dx(m.chart, f), dy(m.chart, f))


def inner(m, a, b):
    """Metric inner product of two covariant vector fields."""
    return m.inv_conf * (a.x * b.x + a.y * b.y)


def norm_sq(m, v):
    return inner(m, v, v)


def grad_norm_sq(m, f):
    return norm_sq(m, gradient(m, f))


def hessian(m, f):
    """Covariant Hessian with the Christoffel symbols of ``exp(2u) delta``."""
    m.check(f)
    c = m.chart
    fx, fy = dx(c, f), dy(c, f)
    ux, uy = m.du
    return SymTensor(
        d2(c, f, 0) - ux * fx + uy * fy,
        dxy(c, f) - ux * fy - uy * fx,
        d2(c, f, 1) - uy * fy + ux * fx,
    )


def trace(m, t):
    return m.inv_conf * (t.xx + t.yy)


def tensor_inner(m, a, b):
    return m.inv_conf**2 * (a.xx * b.xx + 2.0 * a.xy * b.xy + a.yy * b.yy)


def tensor_norm_sq(m, t):
    return tensor_inner(m, t, t)


def tensor_apply(m, t, v, w=None):
    """``t(V, W)`` for covariant fields ``V, W`` (indices raised with the metric)."""
    w = v if w is None else w
    return m.inv_conf**2 * (t.xx * v.x * w.x + t.xy * (v.x * w.y + v.y * w.x) + t.yy * v.y * w.y)


def relative_eigenvalues(m, t):
    """Eigenvalues of ``t`` relative to ``g`` (pointwise), as ``(lo, hi)``."""
    mean = 0.5 * (t.xx + t.yy)
    rad = np.sqrt((0.5 * (t.xx - t.yy)) ** 2 + t.xy**2)
    return m.inv_conf * (mean - rad), m.inv_conf * (mean + rad)


def outer(v, w=None):
    w = v if w is None else w
    return SymTensor(v.x * w.x, 0.5 * (v.x * w.y + v.y * w.x), v.y * w.y)


def gauss_curvature(m):
    return -m.inv_conf * flat_laplacian(m.chart, m.u)


def scalar_curvature(m):
    return 2.0 * gauss_curvature(m)


def ricci(m):
    """``Rc = K g``; with ``g = exp(2u) delta`` this is ``-lap0(u) delta``."""
    lap = -flat_laplacian(m.chart, m.u)
    return SymTensor(lap, np.zeros_like(lap), lap.copy())


def divergence_sym(m, t):
    """Covariant divergence ``Div(t)_k = g^{ij} nabla_i t_jk``.

    In two dimensions the contracted Christoffel term ``g^{ij} Gamma^m_ij``
    vanishes and only ``-du_k tr_0(t)`` survives.
    """
    m.check(t)
    c = m.chart
    ux, uy = m.du
    tr0 = t.xx + t.yy
    return Vector(
        m.inv_conf * (dx(c, t.xx) + dy(c, t.xy) - ux * tr0),
        m.inv_conf * (dx(c, t.xy) + dy(c, t.yy) - uy * tr0),
    )


def gauss_bonnet_defect(m):
    """``|int K dmu|``, which vanishes on a torus."""
    return abs(integrate(m, gauss_curvature(m)))


def bianchi_residual(m):
    """Sup of the metric length of ``Div(Rc) - grad(R)/2``."""
    res = divergence_sym(m, ricci(m)).plus(gradient(m, scalar_curvature(m)).scale(-0.5))
    return float(np.sqrt(np.max(norm_sq(m, res))))


def divergence_covector(m, w):
    """``g^{ij} nabla_i w_j`` for a one-form ``w``."""
    m.check(w)
    return m.inv_conf * (dx(m.chart, w.x) + dy(m.chart, w.y))


def divergence_vector(m, w):
    """Riemannian divergence of a contravariant field ``W^k``."""
    ux, uy = m.du
    return dx(m.chart, w.x) + dy(m.chart, w.y) + 2.0 * (w.x * ux + w.y * uy)


def directional(m, w, f):
    """``W^k d_k f`` for a contravariant field ``W``."""
    return w.x * dx(m.chart, f) + w.y * dy(m.chart, f)


def integrate(m, f):
    """Midpoint quadrature of ``f dmu`` (trapezoid and midpoint coincide on periodic grids)."""
    m.check(f)
    return float(np.sum(f * m.volume_element))


def mean(m, f):
    return integrate(m, f) / m.volume


def unit_vector(m, axis, sign=1.0):
    """Covariant field of metric length one along a coordinate axis."""
    e = np.exp(m.u) * sign
    z = np.zeros_like(e)
    return Vector(e, z) if axis == 0 else Vector(z, e)


def torus_displacement(chart, point):
    """Signed flat displacement from ``point`` to each grid node, wrapped to the nearest image."""
    X, Y = chart.mesh
    ddx = (X - point[0] + 0.5 * chart.lx) % chart.lx - 0.5 * chart.lx
    ddy = (Y - point[1] + 0.5 * chart.ly) % chart.ly - 0.5 * chart.ly
    return ddx, ddy


def torus_distance_sq(chart, point):
    """Squared flat torus distance to ``point`` (minimum over periodic images)."""
    ddx, ddy = torus_displacement(chart, point)
    return ddx**2 + ddy**2


def check_laplacian_evolution(traj, f, t):
    """Sup-norm residual of the evolution formula for the Laplace-Beltrami operator.

    Compares the centered time difference of ``Delta_{g(t)} f`` (``f`` fixed)
    with ``2<alpha, Hess f> + <2 Div(alpha) - grad S, grad f>`` at time ``t``.
    On gauged trajectories the Lie-derivative commutator is removed so both
    sides refer to the same fixed function on the evolving manifold.
    """
    k = traj.interior_index(t)
    m = traj.metric(k)
    m.check(f)
    dtk = traj.times[k + 1] - traj.times[k - 1]
    lhs = (laplace_beltrami(traj.metric(k + 1), f) - laplace_beltrami(traj.metric(k - 1), f)) / dtk
    w = traj.gauge(k)
    if w is not None:
        lhs = lhs - directional(m, w, laplace_beltrami(m, f)) + laplace_beltrami(m, directional(m, w, f))
    snap = traj.snapshot(k)
    grad_f = gradient(m, f)
    drift = divergence_sym(m, snap.alpha).scale(2.0).plus(gradient(m, snap.trace_s).scale(-1.0))
    rhs = 2.0 * tensor_inner(m, snap.alpha, hessian(m, f)) + inner(m, drift, grad_f)
    return float(np.max(np.abs(lhs - rhs)))
