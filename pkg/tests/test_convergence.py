from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowharnack import convergence


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 6.0), st.floats(1e-3, 1e3), st.integers(2, 6))
def test_orders_of_exact_power_law(p, c, levels):
    hs = 0.5 ** np.arange(levels)
    errs = c * hs**p
    assert np.allclose(convergence.pairwise_orders(hs, errs), p, rtol=1e-9)
    assert convergence.fitted_order(hs, errs) == pytest.approx(p, rel=1e-9)
    assert convergence.observed_order(hs, errs) == pytest.approx(p, rel=1e-9)


def test_observed_order_is_the_weakest_pair():
    hs = [0.4, 0.2, 0.1]
    errs = [1.6e-1, 4e-2, 2e-2]
    assert convergence.observed_order(hs, errs) == pytest.approx(1.0)
    assert convergence.pairwise_orders(hs, errs)[0] == pytest.approx(2.0)


@pytest.mark.parametrize("hs,errs", [([0.1], [1.0]), ([0.1, 0.05], [1.0]), ([0.1, 0.05], [1.0, 0.0])])
def test_invalid_inputs(hs, errs):
    with pytest.raises(ValueError):
        convergence.pairwise_orders(hs, errs)
