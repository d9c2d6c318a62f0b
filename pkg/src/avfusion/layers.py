"""Small parameterized building blocks shared by the network modules."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    """Affine map on row features: y = x @ w + b."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = glorot_uniform(rng, in_dim, out_dim, dtype=dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.w), self.b)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    """Learnable layer normalization over the channel axis."""

    def __init__(self, dim, dtype=np.float32):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class FeedForward:
    """Two linear layers with a 2x hidden expansion and ReLU."""

    def __init__(self, dim, rng, dtype=np.float32):
        self.inner = Linear(dim, 2 * dim, rng, dtype=dtype)
        self.outer = Linear(2 * dim, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))

    def parameters(self):
        out = {}
        for name, p in self.inner.parameters().items():
            out[f"inner.{name}"] = p
        for name, p in self.outer.parameters().items():
            out[f"outer.{name}"] = p
        return out


def collect_parameters(obj, prefix=""):
    """Flatten a ``parameters()`` mapping that may contain nested blocks."""
    out = {}
    for name, item in obj.parameters().items():
        key = f"{prefix}{name}"
        if isinstance(item, Tensor):
            out[key] = item
        else:
            out.update(collect_parameters(item, prefix=f"{key}."))
    return out
