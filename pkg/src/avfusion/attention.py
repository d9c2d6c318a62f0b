"""Windowed self-attention and cross-modal attention blocks.

Snippet features are ``s x C1`` matrices. Attention is confined to a
fixed interaction window of half-width ``d`` around each snippet: the
band mask admits positions ``max(0, t-d) .. min(s-1, t+d)``. Masking is
applied as an additive -inf bias before the softmax, which keeps the
normalization semantics intact and makes out-of-band weights exactly
zero.

A single :class:`AttentionBlock` serves both flavours: self-attention
feeds the block one feature matrix for queries, keys and values; the
cross-modal variant draws queries from one modality and keys/values
from the other while both directions share the same parameter storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, MaskingError
from .layers import FeedForward, LayerNorm, Linear, collect_parameters, glorot_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class WindowSpec:
    """Half-width of the interaction window, in snippets. ``None`` = unrestricted."""

    d: int | None = None

    def mask(self, s: int) -> np.ndarray:
        if self.d is None:
            return np.ones((s, s), dtype=bool)
        if self.d < 0:
            raise DimensionError(f"window half-width must be >= 0, got {self.d}")
        idx = np.arange(s)
        return np.abs(idx[:, None] - idx[None, :]) <= self.d


def band_mask(s: int, d: int | None) -> np.ndarray:
    return WindowSpec(d).mask(s)


def att(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention for one head.

    ``softmax(q k^T / sqrt(d_k) + bias) v`` where ``bias`` is 0 on
    permitted positions and -inf elsewhere.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("att expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"att shapes incompatible: q{q.shape} k{k.shape} v{v.shape}")
    d_k = q.shape[1]
    scores = T.mul_const(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        if mask.shape != scores.shape:
            raise DimensionError(f"mask shape {mask.shape} vs scores {scores.shape}")
        if not mask.any(axis=1).all():
            raise MaskingError("attention mask leaves a row with no permitted position")
        bias = np.where(mask, 0.0, -np.inf).astype(q.dtype)
        scores = T.add(scores, T.constant(bias, dtype=q.dtype))
    weights = T.softmax(scores, axis=1)
    out = T.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


class AttentionBlock:
    """Multi-head windowed attention + feed-forward, LayerNorm and residual.

    Layout per call with query source Fq and key/value source Fkv:

        x   = LayerNorm(Fq + MultiHead(Fq, Fkv))
        out = x + FeedForward(x)

    so zeroing the output projection and the feed-forward weights leaves
    exactly the layer-normed input on the residual path.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % n_heads != 0:
            raise DimensionError(f"channel width {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.d_k = dim // n_heads
        self.w_q = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.w_k = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.w_v = Tensor(glorot_uniform(rng, dim, dim, dtype=dtype), requires_grad=True)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)
        self.ff = FeedForward(dim, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self._head_cols = [np.arange(h * self.d_k, (h + 1) * self.d_k) for h in range(n_heads)]

    def _head(self, x: Tensor, h: int) -> Tensor:
        cols = self._head_cols[h]
        idx = np.arange(x.shape[0])[:, None] * self.dim + cols[None, :]
        return T.take_flat(x, idx)

    def __call__(self, f_q: Tensor, f_kv: Tensor, window: WindowSpec, return_weights: bool = False):
        if f_q.shape[1] != self.dim or f_kv.shape[1] != self.dim:
            raise DimensionError(f"expected {self.dim} channels, got {f_q.shape} / {f_kv.shape}")
        mask = window.mask(f_q.shape[0])
        if mask.shape[1] != f_kv.shape[0]:
            raise DimensionError("query and key/value snippet counts differ")
        q_all = T.matmul(f_q, self.w_q)
        k_all = T.matmul(f_kv, self.w_k)
        v_all = T.matmul(f_kv, self.w_v)
        heads, weights = [], []
        for h in range(self.n_heads):
            res = att(self._head(q_all, h), self._head(k_all, h), self._head(v_all, h),
                      mask, return_weights=True)
            heads.append(res[0])
            weights.append(res[1])
        attn = self.out_proj(T.concat(heads, axis=1))
        x = self.norm(T.add(f_q, attn))
        out = T.add(x, self.ff(x))
        if return_weights:
            return out, [w.data.copy() for w in weights]
        return out

    def parameters(self):
        return {
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "out_proj": self.out_proj,
            "ff": self.ff,
            "norm": self.norm,
        }


def sa_block(f_m: Tensor, window: WindowSpec, block: AttentionBlock, return_weights: bool = False):
    """Windowed self-attention: queries, keys and values all from one modality."""
    return block(f_m, f_m, window, return_weights=return_weights)


def cma_block(f_m: Tensor, f_other: Tensor, window: WindowSpec, block: AttentionBlock,
              return_weights: bool = False):
    """Windowed cross-modal attention: queries from ``f_m``, keys/values from ``f_other``.

    Both directions are served by the same ``block`` instance, so the
    audio-queries and visual-queries passes share parameter storage.
    """
    return block(f_m, f_other, window, return_weights=return_weights)


class GatedFusion:
    """Channel-gated sum of the parallel SA and CMA outputs.

    out = sigmoid(Ws . [Fs | Fc] + bs) * Fs + sigmoid(Wc . [Fs | Fc] + bc) * Fc
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.gate_s = Linear(2 * dim, dim, rng, dtype=dtype)
        self.gate_c = Linear(2 * dim, dim, rng, dtype=dtype)

    def __call__(self, f_s: Tensor, f_c: Tensor) -> Tensor:
        if f_s.shape != f_c.shape:
            raise DimensionError(f"gated fusion shapes differ: {f_s.shape} vs {f_c.shape}")
        both = T.concat([f_s, f_c], axis=1)
        g_s = T.sigmoid(self.gate_s(both))
        g_c = T.sigmoid(self.gate_c(both))
        return T.add(T.mul(g_s, f_s), T.mul(g_c, f_c))

    def parameters(self):
        return {"gate_s": self.gate_s, "gate_c": self.gate_c}


def gated_parallel_fusion(f_s: Tensor, f_c: Tensor, gate: GatedFusion) -> Tensor:
    return gate(f_s, f_c)


class DilatedResidualBlock:
    """Kernel-3 dilated 1-D convolution over the snippet axis, ReLU, residual add.

    With dilation >= s the shifted taps fall entirely outside the clip
    and the block degrades to a pointwise transform; that is documented
    behaviour, not an error.
    """

    def __init__(self, dim: int, dilation: int, rng: np.random.Generator, dtype=np.float32):
        if dilation < 1:
            raise DimensionError(f"dilation must be >= 1, got {dilation}")
        self.dilation = dilation
        fan = 3 * dim
        self.k_prev = Tensor(glorot_uniform(rng, fan, dim, shape=(dim, dim), dtype=dtype), requires_grad=True)
        self.k_self = Tensor(glorot_uniform(rng, fan, dim, shape=(dim, dim), dtype=dtype), requires_grad=True)
        self.k_next = Tensor(glorot_uniform(rng, fan, dim, shape=(dim, dim), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        d = self.dilation
        conv = T.matmul(T.shift_rows(x, d), self.k_prev)
        conv = T.add(conv, T.matmul(x, self.k_self))
        conv = T.add(conv, T.matmul(T.shift_rows(x, -d), self.k_next))
        conv = T.add_bias(conv, self.bias)
        return T.add(x, T.relu(conv))

    def parameters(self):
        return {"k_prev": self.k_prev, "k_self": self.k_self, "k_next": self.k_next, "bias": self.bias}


def dilated_residual_block(x: Tensor, block: DilatedResidualBlock) -> Tensor:
    return block(x)


def block_parameters(block, prefix=""):
    return collect_parameters(block, prefix=prefix)
