"""Sparse probability mappings: sparsemax, 1.5-entmax and its two-class gate.

All three operate on the last axis and return rows on the probability
simplex, with exact zeros outside the support.
"""

from __future__ import annotations

import numpy as np

from tabular.autodiff import gradcheck
from tabular.autodiff.tensor import DTensor, as_tensor
from tabular.errors import BisectionNonConvergence

ENTMAX_ITERATIONS = 60
ENTMAX_TOL = 1e-9


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _sequential_row_sum(a: np.ndarray) -> np.ndarray:
    # fixed left-to-right order; numpy's own reductions switch between
    # pairwise and sequential summation depending on memory layout
    total = np.zeros(a.shape[0])
    for j in range(a.shape[1]):
        total += a[:, j]
    return total


def sparsemax_threshold(z: np.ndarray) -> np.ndarray:
    """Threshold tau per row of a 2-d array, so that max(z - tau, 0) sums to 1."""
    n = z.shape[1]
    zs = -np.sort(-z, axis=1)
    cumsum = np.cumsum(zs, axis=1)
    k = np.arange(1, n + 1, dtype=np.float64)
    in_support = 1.0 + k * zs > cumsum
    # the condition holds on a prefix, so k* is the index of the last True
    k_star = n - np.argmax(in_support[:, ::-1], axis=1)
    rows = np.arange(z.shape[0])
    return (cumsum[rows, k_star - 1] - 1.0) / k_star


def sparsemax(a) -> DTensor:
    """Euclidean projection of each row onto the probability simplex."""
    a = as_tensor(a)
    z = _rows(a.data)
    z = z - z.max(axis=1, keepdims=True)
    tau = sparsemax_threshold(z)
    p = np.maximum(z - tau[:, None], 0.0)
    support = p > 0  # kinks resolved to the inactive side
    if gradcheck._monitors:
        gradcheck.report_kink(z - tau[:, None], support)
    n_support = support.sum(axis=1, keepdims=True)

    def vjp(g):
        g2 = _rows(g) * support
        centred = g2 - g2.sum(axis=1, keepdims=True) / n_support
        return ((centred * support).reshape(a.shape),)

    return DTensor._from_op(p.reshape(a.shape), (a,), vjp, "sparsemax")


sparsemax_rows = sparsemax


def entmax15_threshold(z: np.ndarray) -> np.ndarray:
    """Bisection for tau with sum(max((z - tau)/2, 0)**2) == 1 per row.

    ``z`` must already have its row maximum subtracted, which makes the
    bracket [-2, 0]. Rows are scanned in sorted order so the result only
    depends on the multiset of values (exact permutation equivariance).
    """
    zs = -np.sort(-z, axis=1)
    lo = np.full(z.shape[0], -2.0)
    hi = np.zeros(z.shape[0])
    for _ in range(ENTMAX_ITERATIONS):
        mid = 0.5 * (lo + hi)
        mass = _sequential_row_sum(np.maximum(zs - mid[:, None], 0.0) ** 2) / 4.0
        above = mass >= 1.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    tau = 0.5 * (lo + hi)
    mass = _sequential_row_sum(np.maximum(zs - tau[:, None], 0.0) ** 2) / 4.0
    if not np.all(np.abs(mass - 1.0) <= ENTMAX_TOL):
        worst = float(np.max(np.abs(mass - 1.0)))
        raise BisectionNonConvergence(f"entmax15 bisection left |sum - 1| = {worst:.3e}")
    return tau


def entmax15(a) -> DTensor:
    a = as_tensor(a)
    z = _rows(a.data)
    z = z - z.max(axis=1, keepdims=True)
    tau = entmax15_threshold(z)
    q = np.maximum(z - tau[:, None], 0.0) / 2.0
    p = q * q
    # renormalise with a canonical summation order
    p = p / _sequential_row_sum(-np.sort(-p, axis=1))[:, None]
    q = np.sqrt(p)

    def vjp(g):
        g2 = _rows(g)
        coupling = (q * g2).sum(axis=1, keepdims=True) / q.sum(axis=1, keepdims=True)
        return ((q * (g2 - coupling)).reshape(a.shape),)

    return DTensor._from_op(p.reshape(a.shape), (a,), vjp, "entmax15")


entmax15_rows = entmax15


def _entmoid15(x: np.ndarray) -> np.ndarray:
    # closed form of entmax15([x, 0]): while |x| < 2 the pair is
    # ((sqrt(8 - x^2) +- |x|) / 4)^2, beyond that the smaller one is exactly 0.
    # Normalising by the sum keeps entmoid15(0) == 0.5 and saturation exact.
    ax = np.abs(x)
    root = np.sqrt(np.maximum(8.0 - ax * ax, 0.0))
    large = np.where(ax < 2.0, ((root + ax) / 4.0) ** 2, 1.0)
    small = np.where(ax < 2.0, (np.maximum(root - ax, 0.0) / 4.0) ** 2, 0.0)
    total = large + small
    return np.where(x >= 0, large / total, small / total)


def entmoid15(a) -> DTensor:
    """Elementwise first component of ``entmax15([x, 0])``; a sparse sigmoid."""
    a = as_tensor(a)
    y = _entmoid15(a.data)
    q1, q2 = np.sqrt(y), np.sqrt(1.0 - y)
    slope = q1 * q2 / (q1 + q2)

    return DTensor._from_op(y, (a,), lambda g: (g * slope,), "entmoid15")
