"""Reference implementations and sampling helpers shared by the test modules."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from tabular.autodiff import KinkCrossing, grad_check, kink_monitor
from tabular.data import EncodedDataset
from tabular.models import DataDims, build_model

KINK_MARGIN = 1e-3


def simplex_projection(z: np.ndarray, iterations: int = 200) -> np.ndarray:
    """Euclidean projection of one row onto the simplex, by bisection on the threshold.

    sum(max(z - tau, 0)) is continuous and decreasing in tau, so halving
    [max(z) - 1, max(z)] converges to the unique root without any sorting.
    """
    z = np.asarray(z, dtype=np.float64)
    lo, hi = z.max() - 1.0, z.max()
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.maximum(z - mid, 0.0).sum() >= 1.0:
            lo = mid
        else:
            hi = mid
    return np.maximum(z - 0.5 * (lo + hi), 0.0)


def projection_2d(z0: float, z1: float) -> tuple[float, float]:
    """Closed form for two coordinates: clip the midpoint shift to [0, 1]."""
    p0 = min(max((z0 - z1 + 1.0) / 2.0, 0.0), 1.0)
    return p0, 1.0 - p0


def kkt_residual(z: np.ndarray, p: np.ndarray) -> float:
    """Largest violation of the projection's optimality conditions.

    On the support z_i - p_i equals a common tau; off it z_i <= tau.
    """
    support = p > 0
    tau = np.mean(z[support] - p[support])
    worst = np.max(np.abs(z[support] - p[support] - tau))
    if (~support).any():
        worst = max(worst, float(np.max(z[~support] - tau)))
    return max(float(worst), abs(p.sum() - 1.0), float(-p.min()))


def entmax15_oracle(z: np.ndarray) -> np.ndarray:
    """1.5-entmax of one row via bisection in exact rational arithmetic on the bracket."""
    z = [Fraction(v) for v in np.asarray(z, dtype=np.float64)]
    top = max(z)
    lo, hi = top - 2, top
    for _ in range(80):
        mid = (lo + hi) / 2
        mass = sum(max(v - mid, 0) ** 2 for v in z) / 4
        if mass >= 1:
            lo = mid
        else:
            hi = mid
    tau = (lo + hi) / 2
    return np.array([float(max(v - tau, 0) ** 2 / 4) for v in z])


def loo_oracle(cats, y) -> list[float]:
    """Per-row mean of the other rows' targets in the same category, by brute force."""
    global_mean = sum(y) / len(y)
    out = []
    for i, c in enumerate(cats):
        others = [y[j] for j in range(len(cats)) if j != i and cats[j] == c]
        out.append(sum(others) / len(others) if others else global_mean)
    return out


# -- full-model gradient checks ----------------------------------------------

GRAD_DIMS = DataDims(n_continuous=3, cardinalities=(3, 3), n_outputs=2, task="classification")


def gradcheck_sample(config, seed: int, rows: int = 6, dims: DataDims = GRAD_DIMS):
    """A model and a batch for one gradient-check draw.

    Embedding tables (and AutoInt's continuous-feature vectors) are redrawn
    from N(0, 1): with the N(0, 0.02) training init many downstream
    gradients sit near 1e-9, below the 1e-8 floor of the relative error.
    """
    rng = np.random.default_rng(seed)
    n_cat = len(dims.cardinalities)
    batch = EncodedDataset(
        rng.normal(size=(rows, dims.n_continuous)),
        np.stack([rng.integers(0, c + 1, size=rows) for c in dims.cardinalities], axis=1)
        if n_cat else np.zeros((rows, 0), dtype=np.int64),
        rng.normal(size=(rows, n_cat)),
        rng.integers(0, dims.n_outputs, size=rows) if dims.task == "classification" else rng.normal(size=rows),
    )
    model = build_model(config, dims, np.random.default_rng(seed + 100))
    for name, p in model.parameters().items():
        if "embedding" in name or "cont_vectors" in name:
            p.data[...] = rng.normal(size=p.shape)
    return model, batch


def model_grad_errors(config, n_accept: int = 3, rows: int = 6, max_draws: int = 50, h: float = 1e-5):
    """Max relative gradient error of a full model's loss on the first accepted draws.

    Draws are rejected when a batch-norm input column takes at most two
    distinct values (its normalised output then ignores the column's scale
    and offset, the true gradient is zero up to the variance epsilon, and the
    check would measure rounding), when any relu input or sparsemax score lies within
    ``KINK_MARGIN`` of its kink, or when a finite-difference probe flips an
    activation pattern. Returns ``[(seed, error), ...]``.
    """
    results = []
    for seed in range(max_draws):
        model, batch = gradcheck_sample(config, seed, rows)
        with kink_monitor() as km:
            model(batch, training=True)
        if km.margin < KINK_MARGIN or km.min_distinct <= 2:
            continue

        def loss(*_):
            return model.compute_loss(model(batch, training=True), batch.target)

        try:
            err = grad_check(loss, list(model.parameters().values()), h=h, reject_kinks=True)
        except KinkCrossing:
            continue
        results.append((seed, err))
        if len(results) == n_accept:
            return results
    raise RuntimeError(f"only {len(results)} of {max_draws} draws were accepted")
