"""Named scenarios and the builders that turn a Scenario into solver inputs."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import alpha as al
from . import flow
from . import geometry as geo
from .io import Scenario

PRESETS = {
    "flat-static": Scenario(
        name="flat-static", model="static", u_profile="flat", u_amplitude=0.0, T=0.2,
        basepoint_i=32, basepoint_j=32,
        checks=("dalpha", "equality", "kernel_oracle", "rho", "w_monotone", "gradient", "log_moment", "reduced"),
    ),
    "ricci-perturbed": Scenario(
        name="ricci-perturbed", model="ricci", u_profile="cos-cos", u_amplitude=0.05, T=0.2,
        checks=("dalpha", "harnack", "rho", "w_monotone", "gradient", "log_moment", "reduced"),
    ),
    "extended-ricci": Scenario(
        name="extended-ricci", model="extended-ricci", a=1.0, u_profile="cos-cos", u_amplitude=0.05,
        phi_profile="cos-sum", phi_amplitude=0.3, T=0.2,
        checks=("dalpha", "harnack", "rho", "w_monotone", "gradient", "log_moment"),
    ),
    "negative-control": Scenario(
        name="negative-control", model="custom", schedule="lambda_gt", lam=-0.5, u_profile="flat",
        u_amplitude=0.0, T=0.1, basepoint_i=32, basepoint_j=32,
        checks=("dalpha", "harnack", "rho", "w_monotone"),
    ),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def build_chart(sc):
    return geo.GridChart(sc.nx, sc.ny, sc.lx, sc.ly, sc.scheme)


def _angles(chart):
    X, Y = chart.mesh
    return geo.TWO_PI * X / chart.lx, geo.TWO_PI * Y / chart.ly


def initial_u(sc, chart):
    x, y = _angles(chart)
    if sc.u_profile == "flat":
        return chart.zeros()
    if sc.u_profile == "cos-cos":
        return sc.u_amplitude * np.cos(x) * np.cos(y)
    return sc.u_amplitude * np.sin(x) * np.cos(y)


def initial_phi(sc, chart):
    x, y = _angles(chart)
    if sc.phi_profile == "none":
        return None
    if sc.phi_profile == "cos-sum":
        return sc.phi_amplitude * (np.cos(x) + np.cos(y))
    return sc.phi_amplitude * (np.sin(x) + np.sin(y))


def model_params(sc):
    return {"model": sc.model, "a": sc.a, "schedule": sc.schedule, "lam": sc.lam}


def build_model(params, m0):
    tag = params["model"]
    if tag == "ricci":
        return al.Ricci()
    if tag == "static":
        return al.Static()
    if tag == "extended-ricci":
        return al.ExtendedRicci(params["a"])
    if params["schedule"] == "lambda_g0":
        return al.proportional_to_initial(params["lam"], m0)
    return al.proportional_to_current(params["lam"])


def dt_policy(sc):
    if sc.dt_policy == "fixed":
        return flow.DtPolicy("fixed", dt=sc.dt)
    return flow.DtPolicy("cfl", safety=sc.safety)


def probe_function(chart):
    """A smooth positive non-constant function with no symmetry about the usual basepoints."""
    x, y = _angles(chart)
    return 1.0 + 0.5 * np.sin(x + 0.7) * np.cos(y - 0.4)


def run_flow(sc):
    chart = build_chart(sc)
    m0 = geo.ConformalMetric(chart, initial_u(sc, chart))
    model = build_model(model_params(sc), m0)
    aux0 = initial_phi(sc, chart) if getattr(model, "needs_aux", False) else None
    return flow.evolve(model, m0, aux0, T=sc.T, dt_policy=dt_policy(sc), store_stride=sc.store_stride,
                       nonconformal=sc.nonconformal)
