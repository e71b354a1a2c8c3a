from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import wavy_metric
from flowharnack import convergence
from flowharnack import geometry as geo
from flowharnack.errors import ChartMismatchError

coef = st.floats(-0.3, 0.3, allow_nan=False)


def trig_field(chart, a, b, c):
    X, Y = chart.mesh
    return a * np.cos(X) * np.sin(Y) + b * np.sin(2 * X - Y) + c * np.cos(3 * Y)


@pytest.mark.parametrize("n", [15, 17, 8])
def test_chart_rejects_bad_sizes(n):
    with pytest.raises(ValueError):
        geo.GridChart(n, 32)


def test_chart_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        geo.GridChart(32, 32, scheme="fd6")


def test_spectral_derivatives_exact_on_trig():
    chart = geo.GridChart(32, 32, scheme="spectral")
    X, Y = chart.mesh
    f = np.sin(3 * X) * np.cos(2 * Y)
    assert np.allclose(geo.dx(chart, f), 3 * np.cos(3 * X) * np.cos(2 * Y), atol=1e-12)
    assert np.allclose(geo.flat_laplacian(chart, f), -13 * f, atol=1e-11)


@pytest.mark.parametrize("scheme,order", [("fd2", 2), ("fd4", 4)])
def test_finite_difference_orders(scheme, order):
    hs, errs = [], []
    for n in (16, 32, 64):
        chart = geo.GridChart(n, n, scheme=scheme)
        X, Y = chart.mesh
        f = np.exp(np.sin(X)) * np.cos(Y)
        exact = np.exp(np.sin(X)) * (np.cos(X) ** 2 - np.sin(X)) * np.cos(Y) - f
        hs.append(chart.hmin)
        errs.append(np.max(np.abs(geo.flat_laplacian(chart, f) - exact)))
    assert convergence.observed_order(hs, errs) > order - 0.2


def test_gauss_curvature_matches_formula():
    chart = geo.GridChart(32, 32, scheme="spectral")
    X, _ = chart.mesh
    a = 0.3
    m = geo.ConformalMetric(chart, a * np.cos(X))
    # K = -exp(-2u) lap u = a cos x exp(-2 a cos x)
    assert np.allclose(geo.gauss_curvature(m), a * np.cos(X) * np.exp(-2 * a * np.cos(X)), atol=1e-12)
    assert np.allclose(geo.trace(m, geo.ricci(m)), geo.scalar_curvature(m), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(coef, coef, coef, st.sampled_from(["fd2", "fd4", "spectral"]))
def test_gauss_bonnet_on_random_metrics(a, b, c, scheme):
    chart = geo.GridChart(32, 32, scheme=scheme)
    m = geo.ConformalMetric(chart, trig_field(chart, a, b, c))
    assert geo.gauss_bonnet_defect(m) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(coef, coef, coef)
def test_laplacian_integrates_to_zero(a, b, c):
    m = wavy_metric(32, scheme="fd2")
    f = np.exp(trig_field(m.chart, a, b, c))
    assert abs(geo.integrate(m, geo.laplace_beltrami(m, f))) <= 1e-10 * (1 + np.max(np.abs(f)))


def test_laplacian_self_adjoint():
    m = wavy_metric(32, scheme="fd4")
    f = trig_field(m.chart, 0.2, 0.1, -0.3)
    g = np.exp(trig_field(m.chart, -0.1, 0.3, 0.2))
    lhs = geo.integrate(m, f * geo.laplace_beltrami(m, g))
    rhs = geo.integrate(m, g * geo.laplace_beltrami(m, f))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_bianchi_spectral_small():
    assert geo.bianchi_residual(wavy_metric(64)) < 1e-9


def test_volume_of_flat_torus():
    m = geo.ConformalMetric(geo.GridChart(16, 16), np.zeros((16, 16)))
    assert m.volume == pytest.approx(4 * math.pi**2, rel=1e-14)


def test_mismatched_field_shape():
    m = wavy_metric(32)
    with pytest.raises(ChartMismatchError):
        geo.laplace_beltrami(m, np.zeros((16, 16)))


def test_unit_vector_has_unit_length():
    m = wavy_metric(32)
    for axis in (0, 1):
        assert np.allclose(geo.norm_sq(m, geo.unit_vector(m, axis)), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi))
def test_torus_distance_bounded_and_zero_at_point(px, py):
    chart = geo.GridChart(32, 32)
    d2 = geo.torus_distance_sq(chart, (px, py))
    assert np.all(d2 <= 2 * math.pi**2 + 1e-12)
    i, j = int(round(px / chart.hx)) % 32, int(round(py / chart.hy)) % 32
    assert d2[i, j] <= 0.5 * chart.hx**2 + 1e-12
