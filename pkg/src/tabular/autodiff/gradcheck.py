from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from tabular.autodiff.tensor import DTensor, backward

_monitors: list["KinkMonitor"] = []


class KinkCrossing(ArithmeticError):
    """A finite-difference probe moved an activation across a kink."""


class KinkMonitor:
    """Kink bookkeeping for the ops evaluated while the monitor is active.

    relu reports ``|x|`` and its active set; sparsemax reports
    ``|z_i - tau|`` and its support. ``margin`` is the smallest distance
    seen and ``patterns`` the sequence of active sets.

    Training-mode batch norm reports its input; ``min_distinct`` is the
    fewest distinct values any such column took. A column with two or fewer
    normalises to a pattern that ignores its scale and offset, so gradients
    flowing into it vanish up to the variance epsilon.
    """

    def __init__(self):
        self.margin = np.inf
        self.patterns: list[np.ndarray] = []
        self.min_distinct = np.inf

    def report(self, distances: np.ndarray, pattern: np.ndarray) -> None:
        if distances.size:
            self.margin = min(self.margin, float(np.min(distances)))
        self.patterns.append(pattern.copy())

    def same_patterns(self, other: KinkMonitor) -> bool:
        return len(self.patterns) == len(other.patterns) and all(
            np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns)
        )


@contextlib.contextmanager
def kink_monitor() -> Iterator[KinkMonitor]:
    monitor = KinkMonitor()
    _monitors.append(monitor)
    try:
        yield monitor
    finally:
        _monitors.remove(monitor)


def report_kink(distances: np.ndarray, pattern: np.ndarray) -> None:
    for monitor in _monitors:
        monitor.report(np.abs(distances), pattern)


def report_batch_columns(x: np.ndarray) -> None:
    if not _monitors or not x.size:
        return
    distinct = min(len(np.unique(col)) for col in x.T)
    for monitor in _monitors:
        monitor.min_distinct = min(monitor.min_distinct, distinct)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _probe(f: Callable[[], DTensor], reference: KinkMonitor | None) -> float:
    if reference is None:
        return f().item()
    with kink_monitor() as km:
        value = f().item()
    if not km.same_patterns(reference):
        raise KinkCrossing("a finite-difference probe changed an activation pattern")
    return value


def numeric_grad(
    f: Callable[[], DTensor],
    tensor: DTensor,
    h: float = 1e-5,
    reference: KinkMonitor | None = None,
) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``tensor.data`` (perturbed in place).

    With a ``reference`` monitor, every probe must reproduce its activation
    patterns, otherwise :class:`KinkCrossing` is raised.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        try:
            flat[i] = orig + h
            up = _probe(f, reference)
            flat[i] = orig - h
            down = _probe(f, reference)
        finally:
            flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(
    f: Callable[..., DTensor],
    inputs: Sequence[DTensor],
    h: float = 1e-5,
    reject_kinks: bool = False,
) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``f(*inputs)`` must return a scalar. Central differences straddling a
    relu or sparsemax kink are meaningless, so evaluate at inputs away from
    them; with ``reject_kinks`` a probe that flips any activation pattern
    raises :class:`KinkCrossing` and the caller should draw a new sample.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    reference = None
    if reject_kinks:
        with kink_monitor() as reference:
            loss = f(*inputs)
    else:
        loss = f(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: f(*inputs), t, h, reference)
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
