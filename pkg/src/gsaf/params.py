"""Named parameter collections and flat gradient vectors.

A ParameterSet is an ordered mapping name -> leaf Tensor. Iteration order
is the insertion order of the builder that created it, so two sets built
from the same config enumerate identically, and flatten/unflatten is a
bijection with a stable layout. Flat gradients and flat values are plain
float64 numpy vectors of length ``total_count``.
"""

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class ParameterSet:
    def __init__(self, named):
        self._params = dict(named)
        for name, t in self._params.items():
            if not isinstance(t, Tensor) or not t.requires_grad:
                raise ShapeError(f"parameter {name!r} must be a Tensor with requires_grad")
        self.total_count = sum(t.data.size for t in self._params.values())

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def clone(self) -> "ParameterSet":
        """Deep-copy into fresh leaf tensors (gradients are not copied)."""
        return ParameterSet(
            {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self._params.items()}
        )

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def flatten_values(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def flatten_gradients(self) -> np.ndarray:
        """Concatenate gradients in stable order; untouched parameters read as zeros."""
        parts = []
        for t in self._params.values():
            if t.grad is None:
                parts.append(np.zeros(t.data.size))
            else:
                parts.append(np.asarray(t.grad).ravel())
        return np.concatenate(parts)

    def unflatten(self, vec) -> dict:
        """Split a flat vector back into per-parameter arrays (stable order)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_count,):
            raise ShapeError(f"expected flat vector of length {self.total_count}, got {vec.shape}")
        out = {}
        offset = 0
        for name, t in self._params.items():
            size = t.data.size
            out[name] = vec[offset : offset + size].reshape(t.data.shape).copy()
            offset += size
        return out

    def replace_values(self, vec) -> "ParameterSet":
        """New ParameterSet with the same layout and values taken from ``vec``."""
        chunks = self.unflatten(vec)
        return ParameterSet({name: Tensor(arr, requires_grad=True) for name, arr in chunks.items()})


def flatten_gradients(params: ParameterSet) -> np.ndarray:
    return params.flatten_gradients()


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
