"""DTensor: a double-precision array node in a define-by-run graph.

Every op builds a fresh node holding its parents and a vector-Jacobian
closure. ``backward`` orders the graph reachable from a scalar loss
(the "tape"), walks it in reverse and accumulates into the ``grad`` of
leaf tensors that have ``requires_grad`` set. Intermediate gradients
live only for the duration of one ``backward`` call, so running it twice
on the same graph without zeroing doubles every leaf gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from tabular.errors import NonScalarLoss

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DTensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_op")
    # make numpy hand mixed expressions (ndarray * DTensor) to our operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[DTensor, ...] = ()
        self._vjp: VJP | None = None
        self._op = "leaf"

    # -- construction -----------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[DTensor], vjp: VJP, op: str) -> DTensor:
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> DTensor:
        return DTensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DTensor(shape={self.shape}, op={self._op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implementations live in ops) ---------------------

    def __add__(self, other):
        from tabular.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from tabular.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from tabular.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from tabular.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from tabular.autodiff import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from tabular.autodiff import ops

        return ops.div(other, self)

    def __neg__(self):
        from tabular.autodiff import ops

        return ops.neg(self)

    def __pow__(self, exponent: float):
        from tabular.autodiff import ops

        return ops.power(self, exponent)

    def __matmul__(self, other):
        from tabular.autodiff import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from tabular.autodiff import ops

        return ops.getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        from tabular.autodiff import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from tabular.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from tabular.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from tabular.autodiff import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(value) -> DTensor:
    return value if isinstance(value, DTensor) else DTensor(value)


def topological_order(root: DTensor) -> list[DTensor]:
    """Nodes reachable from ``root``, each placed after all of its parents."""
    order: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: DTensor) -> None:
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
