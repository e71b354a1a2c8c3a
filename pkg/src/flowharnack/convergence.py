"""Observed convergence orders from refinement studies."""
from __future__ import annotations

import numpy as np


def pairwise_orders(hs, errors):
    """``log(e_i / e_{i+1}) / log(h_i / h_{i+1})`` for consecutive levels."""
    hs = np.asarray(hs, dtype=float)
    e = np.asarray(errors, dtype=float)
    if len(hs) != len(e) or len(hs) < 2:
        raise ValueError("need at least two levels with matching sizes")
    if np.any(e <= 0):
        raise ValueError("errors must be positive to take logs")
    return np.log(e[:-1] / e[1:]) / np.log(hs[:-1] / hs[1:])


def fitted_order(hs, errors):
    """Least-squares slope of ``log e`` against ``log h``."""
    hs = np.asarray(hs, dtype=float)
    e = np.asarray(errors, dtype=float)
    return float(np.polyfit(np.log(hs), np.log(e), 1)[0])


def observed_order(hs, errors):
    """The weakest pairwise order, which is what an ``order >= p`` criterion must bound."""
    return float(np.min(pairwise_orders(hs, errors)))
