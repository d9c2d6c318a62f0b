"""Global-level fusion: unrestricted cross-modal attention, pooling, head.

The global stage attends across all snippets (no window), projects the
concatenated heads, adds the local-fusion features back as a residual,
and mean-pools over the snippet axis to one vector per modality. Five
classification-head strategies are supported; Mid-Concat is the
default.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import att
from .errors import ConfigError, DimensionError
from .layers import Linear, collect_parameters, glorot_uniform
from .tensor import Tensor

FUSION_STRATEGIES = ("MidConcat", "Gated", "EWMultiply", "Neural", "Sum")


class GlobalFusion:
    """Windowless multi-head cross-modal attention with pooled residual output.

    For each modality m (queries) against the other modality (keys and
    values), with parameters shared between the two directions:

        e3 = concat(head_1 .. head_n) @ W2
        e4 = mean_pool_snippets(relu(e3 @ Wg + bg + e2_m))
    """

    def __init__(self, dim, n_heads, rng, dtype=np.float32):
        if dim % n_heads != 0:
            raise DimensionError(f"channel width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.d_k = dim // n_heads
        self.w_q = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.w_k = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.w_v = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.w_2 = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def _head(self, x: Tensor, h: int) -> Tensor:
        cols = np.arange(h * self.d_k, (h + 1) * self.d_k)
        idx = np.arange(x.shape[0])[:, None] * self.dim + cols[None, :]
        return T.take_flat(x, idx)

    def _direction(self, e2_q: Tensor, e2_kv: Tensor) -> Tensor:
        q_all = T.matmul(e2_q, self.w_q)
        k_all = T.matmul(e2_kv, self.w_k)
        v_all = T.matmul(e2_kv, self.w_v)
        heads = [att(self._head(q_all, h), self._head(k_all, h), self._head(v_all, h))
                 for h in range(self.n_heads)]
        e3 = T.matmul(T.concat(heads, axis=1), self.w_2)
        merged = T.relu(T.add(self.proj(e3), e2_q))
        return T.mean_pool(merged, axis=0, keepdims=True)

    def __call__(self, e2_a: Tensor, e2_v: Tensor):
        if e2_a.shape != e2_v.shape:
            raise DimensionError(f"global fusion inputs differ: {e2_a.shape} vs {e2_v.shape}")
        e4_a = self._direction(e2_a, e2_v)
        e4_v = self._direction(e2_v, e2_a)
        return e4_a, e4_v

    def parameters(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_2": self.w_2,
                "proj": self.proj}


def global_complementary_fusion(e2_a, e2_v, fusion: GlobalFusion):
    return fusion(e2_a, e2_v)


class FusionHead:
    """Classification head over the two pooled modality vectors."""

    def __init__(self, strategy, dim, num_classes, rng, dtype=np.float32):
        if strategy not in FUSION_STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {strategy!r}; pick from {FUSION_STRATEGIES}")
        if num_classes <= 0:
            raise ConfigError(f"num_classes must be positive, got {num_classes}")
        self.strategy = strategy
        self.dim = dim
        self.num_classes = num_classes
        self.dtype = dtype
        if strategy == "MidConcat":
            self.out = Linear(2 * dim, num_classes, rng, dtype=dtype)
        elif strategy in ("Sum", "EWMultiply"):
            self.out = Linear(dim, num_classes, rng, dtype=dtype)
        elif strategy == "Gated":
            self.gate = Linear(2 * dim, 1, rng, dtype=dtype)
            self.out = Linear(dim, num_classes, rng, dtype=dtype)
        elif strategy == "Neural":
            self.hidden = Linear(2 * dim, dim, rng, dtype=dtype)
            self.out = Linear(dim, num_classes, rng, dtype=dtype)

    def __call__(self, e4_a: Tensor, e4_v: Tensor) -> Tensor:
        if e4_a.shape != e4_v.shape or e4_a.shape != (1, self.dim):
            raise DimensionError(
                f"fusion head expects two 1x{self.dim} vectors, got {e4_a.shape} / {e4_v.shape}")
        if self.strategy == "MidConcat":
            return self.out(T.concat([e4_a, e4_v], axis=1))
        if self.strategy == "Sum":
            return self.out(T.add(e4_a, e4_v))
        if self.strategy == "EWMultiply":
            return self.out(T.mul(e4_a, e4_v))
        if self.strategy == "Gated":
            g = T.sigmoid(self.gate(T.concat([e4_a, e4_v], axis=1)))
            ones = T.constant(np.ones((1, self.dim)), dtype=e4_a.dtype)
            g_row = T.matmul(g, ones)
            inv_row = T.add(ones, T.mul_const(g_row, -1.0))
            return self.out(T.add(T.mul(g_row, e4_a), T.mul(inv_row, e4_v)))
        # Neural: one hidden layer over the concatenation
        return self.out(T.relu(self.hidden(T.concat([e4_a, e4_v], axis=1))))

    def param_count(self):
        return sum(p.size for p in collect_parameters(self).values())

    def parameters(self):
        out = {"out": self.out}
        if self.strategy == "Gated":
            out["gate"] = self.gate
        elif self.strategy == "Neural":
            out["hidden"] = self.hidden
        return out


def fuse_head(e4_a, e4_v, head: FusionHead) -> Tensor:
    return head(e4_a, e4_v)


def expected_head_param_count(strategy, dim, num_classes):
    """Documented parameter count per strategy (weights plus biases)."""
    k = num_classes
    if strategy == "MidConcat":
        return 2 * dim * k + k
    if strategy in ("Sum", "EWMultiply"):
        return dim * k + k
    if strategy == "Gated":
        return (2 * dim + 1) + dim * k + k
    if strategy == "Neural":
        return 2 * dim * dim + dim + dim * k + k
    raise ConfigError(f"unknown fusion strategy {strategy!r}")
