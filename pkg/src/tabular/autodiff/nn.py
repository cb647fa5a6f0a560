"""Parameter containers and the few stateful layers the models share."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from tabular.autodiff import ops
from tabular.autodiff.tensor import DTensor


class ParamStore:
    """Ordered name -> parameter registry. Iteration follows registration order."""

    def __init__(self):
        self._items: dict[str, DTensor] = {}

    def add(self, name: str, tensor: DTensor) -> DTensor:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._items[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> DTensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def zero_grad(self) -> None:
        for p in self._items.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.size for p in self._items.values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Minimal container: parameters, non-trainable buffers and child modules.

    Names are dotted paths in registration order, which fixes the traversal
    order for the optimizer and for checkpoint serialisation.
    """

    def __init__(self):
        self._params: dict[str, DTensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> DTensor:
        t = DTensor(np.asarray(value, dtype=np.float64).copy(), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        arr = np.array(value, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def add_module(self, name: str, module: Module) -> Module:
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DTensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> ParamStore:
        store = ParamStore()
        for name, p in self.named_parameters():
            store.add(name, p)
        return store

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, as (name, array) in a stable order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in arrays.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {target.shape}")
            target[...] = value


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", glorot_uniform(rng, n_in, n_out))
        self.bias = self.add_param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x) -> DTensor:
        return ops.affine(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = self.add_param("table", rng.normal(0.0, 0.02, size=(n_rows, dim)))

    def __call__(self, indices) -> DTensor:
        return ops.embedding_lookup(self.table, indices)


class BatchNorm(Module):
    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(n))
        self.beta = self.add_param("beta", np.zeros(n))
        self.running_mean = self.add_buffer("running_mean", np.zeros(n))
        self.running_var = self.add_buffer("running_var", np.ones(n))

    def __call__(self, x, training: bool) -> DTensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, momentum=self.momentum, eps=self.eps,
        )
