"""Run orchestration: evolve, solve the conjugate problems, evaluate the requested checks."""
from __future__ import annotations

import logging
import math
from dataclasses import replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import alpha as al
from . import conjugate as cj
from . import convergence
from . import entropy as en
from . import flow
from . import geometry as geo
from . import harnack as hk
from . import io
from . import presets
from . import reduced as rd

log = logging.getLogger(__name__)

GATED = ("harnack", "equality", "rho", "w_monotone", "mu_monotone", "gradient", "log_moment", "reduced", "linf")
TOL_ORACLE = 1e-3
TOL_IDENTITY = 1e-2
ORDER_MIN = 1.8
EXACT_RESIDUAL = 1e-13


class RunContext:
    """Lazily built solver state shared by the checks of one run."""

    def __init__(self, sc, traj=None):
        self.sc = sc
        self._traj = traj
        self.hypothesis = True
        self.series = {}

    @cached_property
    def traj(self):
        return self._traj if self._traj is not None else presets.run_flow(self.sc)

    @property
    def basepoint(self):
        return (self.sc.basepoint_i, self.sc.basepoint_j)

    @cached_property
    def ker(self):
        return cj.solve_kernel(self.traj, self.basepoint)

    @cached_property
    def fwd_one(self):
        return cj.solve_forward(self.traj, np.ones(self.traj.chart.shape))

    @cached_property
    def fwd_probe(self):
        return cj.solve_forward(self.traj, presets.probe_function(self.traj.chart))

    @cached_property
    def bounds(self):
        return flow.measure_bounds(self.traj)

    @property
    def flat_static(self):
        return self.sc.model == "static" and self.sc.u_profile == "flat"


def _record(name, value, tol, ok, **detail):
    return io.CheckRecord(name, float(value), float(tol), "pass" if ok else "fail", detail)


def check_dalpha(ctx):
    traj = ctx.traj
    K = len(traj.times) - 1
    rows = []
    for frac in (0.25, 0.5, 0.75):
        k = min(max(2, int(round(frac * K))), K - 2)
        rows.append(al.dalpha_nonneg_certificate(traj, float(traj.times[k]), seed=ctx.sc.seed))
    worst = min(rows, key=lambda c: c.min_value + c.tol_d)
    ok = all(c.passed for c in rows)
    ctx.hypothesis = ok
    rec = io.CheckRecord("dalpha", worst.min_value, worst.tol_d, "pass" if ok else "warning",
                         {"certificates": [c.to_record() for c in rows]})
    if not ok:
        rec.detail["note"] = "D_alpha < 0 detected: hypothesis unmet, dependent checks skipped"
    return rec


def check_harnack(ctx):
    rep = hk.check_harnack(ctx.ker)
    tol = ctx.sc.tolerance("harnack", rep.tol)
    ctx.series["harnack_max"] = np.array(rep.per_time)
    return _record("harnack", rep.max_lhs, tol, rep.max_lhs <= tol, floor=rep.floor)


def check_equality(ctx):
    rep = hk.check_equality_case(ctx.ker)
    return _record("equality", rep.max_lhs, rep.tol, rep.passed, probes=len(rep.per_time))


def check_kernel_oracle(ctx):
    ker = ctx.ker
    traj = ctx.traj
    lo, hi = 25 * traj.dt, 0.5 * traj.T
    errs = [cj.kernel_oracle_error(ker, t) for t in np.linspace(lo, hi, 5)]
    worst = max(e for e, _ in errs)
    tol = ctx.sc.tolerance("kernel_oracle", TOL_ORACLE)
    drift = ker.mass_drift()
    ok = worst <= tol and drift <= cj.TOL_MASS
    return _record("kernel_oracle", worst, tol, ok, mass_drift=drift, taus=[t for _, t in errs])


def check_rho(ctx):
    tol_limit = ctx.sc.tolerance("rho", hk.TOL_LIMIT)
    one = hk.rho_phi(ctx.ker, ctx.fwd_one, tol_limit=tol_limit)
    probe = hk.rho_phi(ctx.ker, ctx.fwd_probe, tol_limit=tol_limit)
    ctx.series["rho_one"] = one
    worst = max(abs(one.final), abs(probe.final))
    ok = one.monotone and one.limit_ok and probe.monotone and probe.limit_ok
    return _record("rho", worst, tol_limit, ok, phi_one=one.to_record(), phi_probe=probe.to_record())


def check_w_monotone(ctx):
    rep = en.check_w_monotone(ctx.ker)
    ctx.series["w_entropy"] = rep
    inc = float(rep.increments.min()) if len(rep.values) > 1 else 0.0
    return _record("w_monotone", inc, rep.tol_mono, rep.monotone, **rep.to_record())


def check_mu_monotone(ctx):
    traj = ctx.traj
    tau_bar = traj.T + 0.1
    K = len(traj.times) - 1
    idx = sorted({int(round(f * K)) for f in (0.0, 0.33, 0.67, 1.0)})
    rep = en.check_mu_monotone(traj, lambda t: tau_bar - t, idx, seed=ctx.sc.seed)
    inc = float(rep.increments.min())
    return _record("mu_monotone", inc, rep.tol_mono, rep.monotone, values=rep.values.tolist(), tau_bar=tau_bar)


def gradient_window(ker):
    K = len(ker.traj.times) - 1
    return K // 2, max(5, K // 4)


def check_gradient(ctx):
    k_end, steps = gradient_window(ctx.ker)
    rep = hk.gradient_estimate_check(ctx.ker, ctx.bounds, k_end, steps)
    return _record("gradient", rep.max_excess, 0.0, rep.passed, **rep.to_record())


def check_linf(ctx):
    ker = ctx.ker
    c_emp = hk.linf_constant(ker, ker.tau(ker.clean_index()))
    return _record("linf", c_emp, math.inf, math.isfinite(c_emp))


def check_log_moment(ctx):
    ker = ctx.ker
    k = ker.clean_index()
    tol = ctx.sc.tolerance("log_moment", hk.TOL_LIMIT)
    vals = [hk.log_moment_integral(ker, ctx.fwd_one, k), hk.log_moment_integral(ker, ctx.fwd_probe, k)]
    return _record("log_moment", max(vals), tol, max(vals) <= tol, tau=ker.tau(k), values=vals)


def check_reduced(ctx):
    ker, traj = ctx.ker, ctx.traj
    K = len(traj.times) - 1
    k = K // 2
    tau = ker.tau(k)
    ell, res = rd.reduced_distance_field(traj, tau, ctx.basepoint)
    cmp_rep = rd.check_h_le_ell(ker, tau, ell)
    d2, _ = rd.distance_sq_field(traj.metric(K), ctx.basepoint)
    sandwich = rd.check_sandwich(tau, ell, d2, ctx.bounds, traj.chart, traj.store_dt)
    vol = rd.reduced_volume(traj, tau, ell)
    ok = cmp_rep.passed and sandwich.passed and res.converged and vol > 0
    detail = {"sandwich": sandwich.to_record(), "reduced_volume": vol, "tau": tau, "converged": res.converged}
    if ctx.flat_static:
        exact = geo.torus_distance_sq(traj.chart, rd.basepoint_coords(traj.chart, ctx.basepoint)) / (4 * tau)
        far = exact * 4 * tau >= 9 * traj.chart.hmin**2
        rel = float(np.max(np.abs(ell - exact)[far] / exact[far]))
        eps = cj.image_tail(traj.chart, tau) + 1e-3
        detail.update(flat_rel_error=rel, volume_eps=eps)
        ok = ok and rel <= 0.01 and abs(vol - 1.0) <= eps
    return _record("reduced", cmp_rep.max_excess, cmp_rep.tol, ok, **detail)


def smooth_final_data(chart):
    X, Y = chart.mesh
    return np.exp(0.5 * np.cos(geo.TWO_PI * X / chart.lx) + 0.3 * np.sin(2 * geo.TWO_PI * Y / chart.ly))


def check_identity(ctx):
    traj = ctx.traj
    sol = cj.solve_conjugate(traj, smooth_final_data(traj.chart))
    K = len(traj.times) - 1
    t = float(traj.times[K // 2])
    r = hk.identity_residual(sol, t)
    tol = ctx.sc.tolerance("identity", TOL_IDENTITY)
    return _record("identity", r, tol, r <= tol, t=t)


CHECK_FUNCS = {
    "dalpha": check_dalpha,
    "harnack": check_harnack,
    "equality": check_equality,
    "kernel_oracle": check_kernel_oracle,
    "rho": check_rho,
    "w_monotone": check_w_monotone,
    "mu_monotone": check_mu_monotone,
    "gradient": check_gradient,
    "linf": check_linf,
    "log_moment": check_log_moment,
    "reduced": check_reduced,
    "identity": check_identity,
}


def run_checks(ctx, names=None):
    names = ctx.sc.checks if names is None else names
    if "dalpha" in names:
        names = ("dalpha",) + tuple(n for n in names if n != "dalpha")
    records = []
    for name in names:
        if name in GATED and not ctx.hypothesis:
            records.append(io.CheckRecord(name, math.nan, math.nan, "skipped", {"reason": "D_alpha >= 0 not met"}))
            continue
        log.info("check %s", name)
        records.append(CHECK_FUNCS[name](ctx))
    return records


def write_outputs(ctx, outdir, records):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sc = ctx.sc
    io.write_scenario(sc, outdir / "scenario.ini")
    summary = io.write_summary(outdir / "summary.json", sc, records)
    rho = ctx.series.get("rho_one")
    w = ctx.series.get("w_entropy")
    if rho is not None:
        times = ctx.traj.T - rho.taus
        cols = ["time", "tau", "rho_one"]
        data = [times, rho.taus, rho.rho]
        if w is not None and len(w.values) == len(rho.rho):
            cols.append("w_entropy")
            data.append(w.values)
        io.write_series_csv(outdir / "series.csv", sc, cols, zip(*data))
        io.write_dat(outdir / "rho_one.dat", rho.taus, rho.rho, "tau rho_one")
    if w is not None:
        io.write_dat(outdir / "w_entropy.dat", ctx.traj.T - w.times, w.values, "tau W")
    if "harnack_max" in ctx.series:
        rows = ctx.series["harnack_max"]
        io.write_dat(outdir / "harnack_max.dat", rows[:, 0], rows[:, 1], "tau max_harnack_lhs")
    return summary


def exit_code(records):
    return 1 if any(r.verdict == "fail" for r in records) else 0


# ---------------------------------------------------------------------------
# refinement study

def refine_levels(sc, levels, coarsest=32):
    """Observed orders of the identity and Laplacian-evolution residuals under joint refinement.

    Uses second-order differences, a smooth (non-kernel) conjugate solution
    and ``dt`` proportional to ``h^2`` with an even step count.
    """
    T = min(sc.T, 0.05)
    hs, ident, lap = [], [], []
    for i in range(levels):
        n = coarsest * 2**i
        level = replace(sc, nx=n, ny=n, scheme="fd2", T=T, dt_policy="cfl",
                           basepoint_i=sc.basepoint_i * n // sc.nx, basepoint_j=sc.basepoint_j * n // sc.ny)
        chart = presets.build_chart(level)
        m0 = geo.ConformalMetric(chart, presets.initial_u(level, chart))
        steps = 2 * int(math.ceil(T / (2 * flow.cfl_dt(m0))))
        level = replace(level, dt_policy="fixed", dt=T / steps)
        traj = presets.run_flow(level)
        sol = cj.solve_conjugate(traj, smooth_final_data(chart))
        t_mid = float(traj.times[len(traj.times) // 2])
        hs.append(chart.hmin)
        ident.append(hk.identity_residual(sol, t_mid))
        lap.append(geo.check_laplacian_evolution(traj, presets.probe_function(chart), t_mid))
    out = {"h": hs, "identity_residual": ident, "laplacian_residual": lap}
    if levels >= 2:
        for key, res in (("identity", ident), ("laplacian", lap)):
            if max(res) <= EXACT_RESIDUAL:
                # static metrics make some residuals vanish identically; no order to fit
                out[f"{key}_orders"] = [math.inf] * (levels - 1)
            else:
                out[f"{key}_orders"] = convergence.pairwise_orders(hs, res).tolist()
            out[f"{key}_order"] = float(min(out[f"{key}_orders"]))
    return out
