"""Right-hand sides of the abstract flow and the correction quantity ``D_alpha(V)``.

Every model maps a metric (and optionally the scalar field ``phi``) to a
symmetric tensor ``alpha`` with trace ``S = g^{ij} alpha_ij``.  The flow engine
evolves ``dg/dt = -2 alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import MissingAuxError, TrajectoryRangeError

TRACE_FREE_TOL = 1e-10


class AlphaModel:
    tag = "Custom"
    needs_aux = False
    conformal = False

    def alpha(self, m, aux=None, t=0.0):
        raise NotImplementedError

    def ds_dt(self, m, aux=None, t=0.0):
        """Analytic ``dS/dt`` in the un-gauged frame, or ``None`` when unavailable."""
        return None

    def aux_rate(self, m, aux):
        return None

    def params(self):
        return {}

    def __repr__(self):
        return f"{type(self).__name__}({self.params()})"


class Ricci(AlphaModel):
    tag = "Ricci"
    conformal = True

    def alpha(self, m, aux=None, t=0.0):
        return geo.ricci(m)


class Static(AlphaModel):
    tag = "Static"
    conformal = True

    def alpha(self, m, aux=None, t=0.0):
        return geo.zero_tensor(m.chart)

    def ds_dt(self, m, aux=None, t=0.0):
        return m.chart.zeros()


class ExtendedRicci(AlphaModel):
    """Ricci flow coupled to a scalar heat flow: ``alpha = Rc - a dphi (x) dphi``."""

    tag = "ExtendedRicci"
    needs_aux = True

    def __init__(self, a=1.0):
        if not a > 0:
            raise ValueError("coupling constant a must be positive")
        self.a = float(a)

    def params(self):
        return {"a": self.a}

    def _phi(self, aux):
        if aux is None:
            raise MissingAuxError("ExtendedRicci requires the scalar field phi")
        return aux

    def alpha(self, m, aux=None, t=0.0):
        dphi = geo.gradient(m, self._phi(aux))
        return geo.ricci(m).minus(geo.outer(dphi).scale(self.a))

    def trace_formula(self, m, aux):
        return geo.scalar_curvature(m) - self.a * geo.grad_norm_sq(m, self._phi(aux))

    def aux_rate(self, m, aux):
        return geo.laplace_beltrami(m, self._phi(aux))

    def ds_dt(self, m, aux=None, t=0.0):
        # dS/dt = dR/dt - a d|dphi|^2/dt under dg/dt = -2 alpha, dphi/dt = lap phi, with
        # dR/dt = 2 lap S - 2 div div alpha + 2 <alpha, Rc>.
        phi = self._phi(aux)
        al = self.alpha(m, phi)
        s = geo.trace(m, al)
        dphi = geo.gradient(m, phi)
        lap_phi = geo.laplace_beltrami(m, phi)
        divdiv = geo.divergence_covector(m, geo.divergence_sym(m, al))
        dr = 2.0 * geo.laplace_beltrami(m, s) - 2.0 * divdiv + 2.0 * geo.tensor_inner(m, al, geo.ricci(m))
        dgrad = 2.0 * geo.tensor_apply(m, al, dphi) + 2.0 * geo.inner(m, dphi, geo.gradient(m, lap_phi))
        return dr - self.a * dgrad


class Custom(AlphaModel):
    """User supplied tensor schedule ``alpha(t, metric, aux)``.

    ``schedule`` is a callable returning a :class:`~flowharnack.geometry.SymTensor`.
    ``label`` names the schedule for reports and scenario files.
    """

    tag = "Custom"

    def __init__(self, schedule, label="custom", conformal=False, spec=None):
        self.schedule = schedule
        self.label = label
        self.conformal = conformal
        self.spec = spec or {}

    def params(self):
        return {"schedule": self.label, **self.spec}

    def alpha(self, m, aux=None, t=0.0):
        return self.schedule(t, m, aux)


def proportional_to_initial(lam, m0):
    """``alpha = lam * g(0)``; the flow is then ``g(t) = (1 - 2 lam t) g(0)``."""
    conf0 = m0.conf.copy()

    def schedule(t, m, aux):
        c = lam * conf0
        return geo.SymTensor(c, np.zeros_like(c), c.copy())

    return Custom(schedule, label="lambda_g0", conformal=True, spec={"lam": float(lam)})


def proportional_to_current(lam):
    """``alpha = lam * g(t)``: ``S = 2 lam`` stays constant and ``D(0) = -4 lam^2``."""

    def schedule(t, m, aux):
        c = lam * m.conf
        return geo.SymTensor(c, np.zeros_like(c), c.copy())

    return Custom(schedule, label="lambda_gt", conformal=True, spec={"lam": float(lam)})


def tabulated(times, components, label="tabulated"):
    """Schedule linearly interpolated in time from stored ``(K, 3, nx, ny)`` components."""
    times = np.asarray(times, dtype=float)
    comps = np.asarray(components, dtype=float)

    def schedule(t, m, aux):
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise TrajectoryRangeError(f"t={t} outside tabulated schedule [{times[0]}, {times[-1]}]")
        j = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2)) if len(times) > 1 else 0
        if len(times) == 1:
            c = comps[0]
        else:
            w = (t - times[j]) / (times[j + 1] - times[j])
            c = (1 - w) * comps[j] + w * comps[j + 1]
        return geo.SymTensor(c[0], c[1], c[2])

    return Custom(schedule, label=label, conformal=False)


MODEL_TAGS = ("Ricci", "Static", "ExtendedRicci", "Custom")


@dataclass
class AlphaSnapshot:
    metric: geo.ConformalMetric
    alpha: geo.SymTensor
    trace_s: np.ndarray
    aux: np.ndarray | None
    model_tag: str
    t: float = 0.0

    def trace_free_size(self):
        al = self.alpha
        tf = np.abs(0.5 * (al.xx - al.yy)) + np.abs(al.xy)
        return float(np.max(tf * self.metric.inv_conf))

    def self_check(self, model=None, tol=1e-9):
        """Recompute ``S`` independently and return the sup discrepancy."""
        s = geo.trace(self.metric, self.alpha)
        if isinstance(model, ExtendedRicci):
            s = model.trace_formula(self.metric, self.aux)
        elif isinstance(model, Ricci):
            s = geo.scalar_curvature(self.metric)
        err = float(np.max(np.abs(s - self.trace_s)))
        scale = 1.0 + float(np.max(np.abs(self.trace_s)))
        if err > tol * scale:
            raise AssertionError(f"trace self-check failed: {err:.3e}")
        return err


def make_alpha(model, m, aux=None, t=0.0):
    if model.needs_aux and aux is None:
        raise MissingAuxError(f"{model.tag} requires an auxiliary field")
    al = model.alpha(m, aux, t)
    m.check(al)
    return AlphaSnapshot(m, al, geo.trace(m, al), aux, model.tag, float(t))


# ---------------------------------------------------------------------------
# D_alpha

DALPHA_PARTS = ("ds_dt", "minus_lap_s", "minus_two_alpha_sq", "ricci_minus_alpha", "drift")


@dataclass
class DalphaEvaluation:
    value: np.ndarray
    parts: dict = field(default_factory=dict)

    @property
    def min(self):
        return float(self.value.min())

    @property
    def max_abs(self):
        return float(np.abs(self.value).max())


def eval_dalpha(snap, ds_dt, v):
    """All five addends of ``D_alpha(V)`` on one time slice given ``dS/dt``."""
    m = snap.metric
    al, s = snap.alpha, snap.trace_s
    grad_s = geo.gradient(m, s)
    rc_minus = geo.ricci(m).minus(al)
    drift = geo.divergence_sym(m, al).scale(4.0).plus(grad_s.scale(-2.0))
    parts = {
        "ds_dt": np.asarray(ds_dt, dtype=float),
        "minus_lap_s": -geo.laplace_beltrami(m, s),
        "minus_two_alpha_sq": -2.0 * geo.tensor_norm_sq(m, al),
        "ricci_minus_alpha": 2.0 * geo.tensor_apply(m, rc_minus, v),
        "drift": geo.inner(m, drift, v),
    }
    value = parts["ds_dt"] + parts["minus_lap_s"] + parts["minus_two_alpha_sq"]
    value = value + parts["ricci_minus_alpha"] + parts["drift"]
    return DalphaEvaluation(value, parts)


def ds_dt_from_trajectory(traj, k, analytic=True):
    """``dS/dt`` at stored index ``k``; analytic when the model provides it."""
    snap = traj.snapshot(k)
    # analytic rates assume the full tensor flow, which "project" mode does not follow
    if analytic and (traj.model.conformal or traj.nonconformal == "gauge"):
        exact = traj.model.ds_dt(snap.metric, snap.aux, traj.times[k])
        if exact is not None:
            return exact
    if k <= 0 or k >= len(traj.times) - 1:
        raise TrajectoryRangeError(
            f"dS/dt needs an interior time (index {k} of {len(traj.times)}) or an analytic model"
        )
    rate = traj.time_derivative(lambda j: traj.snapshot(j).trace_s, k)
    w = traj.gauge(k)
    if w is not None:
        rate = rate - geo.directional(snap.metric, w, snap.trace_s)
    return rate


def eval_dalpha_generic(traj, t, v, analytic=True):
    k = traj.index(t)
    snap = traj.snapshot(k)
    return eval_dalpha(snap, ds_dt_from_trajectory(traj, k, analytic), v)


def dalpha_closed_form_extended(m, phi, a, v):
    """``2a (lap phi - <grad phi, V>)^2`` for the extended Ricci flow."""
    dphi = geo.gradient(m, phi)
    return 2.0 * a * (geo.laplace_beltrami(m, phi) - geo.inner(m, dphi, v)) ** 2


def dalpha_tolerance(traj, k):
    snap = traj.snapshot(k)
    scale = float(np.max(geo.tensor_norm_sq(snap.metric, snap.alpha)))
    h = traj.chart.hmin
    dt = traj.store_dt
    return 10.0 * (h**2 + dt**2) * scale


def random_unit_fields(m, count, seed=0, modes=3):
    """Smooth random covariant fields of unit metric length."""
    rng = np.random.default_rng(seed)
    X, Y = m.chart.mesh
    px, py = geo.TWO_PI * X / m.chart.lx, geo.TWO_PI * Y / m.chart.ly
    e = np.exp(m.u)
    out = []
    for _ in range(count):
        theta = np.full(X.shape, rng.uniform(0, geo.TWO_PI))
        for _ in range(modes):
            kx, ky = rng.integers(-2, 3, size=2)
            amp, ph = rng.normal(), rng.uniform(0, geo.TWO_PI)
            theta = theta + amp * np.cos(kx * px + ky * py + ph)
        out.append(geo.Vector(e * np.cos(theta), e * np.sin(theta)))
    return out


@dataclass
class DalphaCertificate:
    t: float
    minima: dict
    min_value: float
    tol_d: float
    passed: bool

    def to_record(self):
        return {
            "t": self.t,
            "min_D": self.min_value,
            "tol_D": self.tol_d,
            "passed": self.passed,
            "minima": dict(self.minima),
        }


def dalpha_nonneg_certificate(traj, t, samples=4, seed=0, grad_h=None, analytic=True):
    """Minimum of ``D_alpha(V)`` over a battery of test fields at time ``t``."""
    k = traj.index(t)
    snap = traj.snapshot(k)
    m = snap.metric
    ds = ds_dt_from_trajectory(traj, k, analytic)
    fields = {"zero": geo.zero_vector(m.chart)}
    for axis, name in ((0, "e1"), (1, "e2")):
        fields[f"+{name}"] = geo.unit_vector(m, axis, 1.0)
        fields[f"-{name}"] = geo.unit_vector(m, axis, -1.0)
    if grad_h is not None:
        fields["grad_h"] = grad_h
    for i, v in enumerate(random_unit_fields(m, samples, seed)):
        fields[f"random{i}"] = v
    if isinstance(traj.model, ExtendedRicci):
        phi = snap.aux
        dphi = geo.gradient(m, phi)
        g2 = geo.norm_sq(m, dphi)
        coef = np.where(g2 > 1e-14, geo.laplace_beltrami(m, phi) / np.maximum(g2, 1e-14), 0.0)
        fields["minimizer"] = dphi.scale(coef)
    minima = {name: eval_dalpha(snap, ds, v).min for name, v in fields.items()}
    lo = min(minima.values())
    tol = dalpha_tolerance(traj, k)
    return DalphaCertificate(float(traj.times[k]), minima, lo, tol, lo >= -tol)
