"""Local-level fusion: attentive pyramid layers and selective integration.

Each pyramid layer runs windowed self-attention and cross-modal
attention in parallel, merges the two paths with channel gates, and
finishes with a dilated residual temporal block. The per-layer outputs
are retained as a pyramid; the selective integration stage then weights
the pyramid depths per snippet, modulating the weights of one modality
with a windowless single-head attention over the other modality's
weights, and sums the layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    AttentionBlock,
    DilatedResidualBlock,
    GatedFusion,
    WindowSpec,
    cma_block,
    sa_block,
)
from .errors import ContractError, DimensionError
from .layers import Linear, collect_parameters
from .tensor import Tensor


@dataclass
class PyramidStack:
    """The retained per-layer interactive features of one modality."""

    modality: str
    layers: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.layers)


class PyramidLayer:
    """One interactive layer: parallel SA/CMA, gated merge, temporal block.

    The cross-modal block is a single instance serving both directions;
    the self-attention blocks, gates and temporal convolutions are
    per-modality.
    """

    def __init__(self, dim, n_heads, dilation, rng, dtype=np.float32):
        self.sa_audio = AttentionBlock(dim, n_heads, rng, dtype=dtype)
        self.sa_visual = AttentionBlock(dim, n_heads, rng, dtype=dtype)
        self.cma = AttentionBlock(dim, n_heads, rng, dtype=dtype)
        self.gate_audio = GatedFusion(dim, rng, dtype=dtype)
        self.gate_visual = GatedFusion(dim, rng, dtype=dtype)
        self.temporal_audio = DilatedResidualBlock(dim, dilation, rng, dtype=dtype)
        self.temporal_visual = DilatedResidualBlock(dim, dilation, rng, dtype=dtype)

    def __call__(self, f_a: Tensor, f_v: Tensor, window: WindowSpec):
        sa_a = sa_block(f_a, window, self.sa_audio)
        sa_v = sa_block(f_v, window, self.sa_visual)
        cma_a = cma_block(f_a, f_v, window, self.cma)
        cma_v = cma_block(f_v, f_a, window, self.cma)
        out_a = self.temporal_audio(self.gate_audio(sa_a, cma_a))
        out_v = self.temporal_visual(self.gate_visual(sa_v, cma_v))
        return out_a, out_v

    def parameters(self):
        return {
            "sa_audio": self.sa_audio,
            "sa_visual": self.sa_visual,
            "cma": self.cma,
            "gate_audio": self.gate_audio,
            "gate_visual": self.gate_visual,
            "temporal_audio": self.temporal_audio,
            "temporal_visual": self.temporal_visual,
        }


def pyramid_forward(f_a: Tensor, f_v: Tensor, window: WindowSpec, layers):
    """Run the pyramid and retain every layer output per modality."""
    if f_a.shape != f_v.shape:
        raise DimensionError(f"modal features must align, got {f_a.shape} vs {f_v.shape}")
    stack_a = PyramidStack("audio")
    stack_v = PyramidStack("visual")
    for layer in layers:
        f_a, f_v = layer(f_a, f_v, window)
        stack_a.layers.append(f_a)
        stack_v.layers.append(f_v)
    return stack_a, stack_v


class SelectiveIntegration:
    """Per-snippet weighting over pyramid depths with cross-modal modulation.

    Layer weights are one scalar per (snippet, layer): each retained
    layer is projected channels -> 1 and squashed with a sigmoid. The
    weights of modality m are then modulated by a windowless attention
    over the other modality's weights (one head, unit dimension) and
    used in a weighted sum over the pyramid layers.

    ``shared_layer_weights`` switches the per-layer projections to a
    single projection reused across depths.
    """

    def __init__(self, dim, depth, rng, dtype=np.float32, shared_layer_weights=False):
        self.depth = depth
        if shared_layer_weights:
            proj = Linear(dim, 1, rng, dtype=dtype)
            self.weight_proj = [proj] * depth
        else:
            self.weight_proj = [Linear(dim, 1, rng, dtype=dtype) for _ in range(depth)]
        self.shared_layer_weights = shared_layer_weights
        scale = 1.0 / np.sqrt(2.0)
        self.w_q = Tensor(rng.uniform(-scale, scale, size=(1, 1)).astype(dtype), requires_grad=True)
        self.w_k = Tensor(rng.uniform(-scale, scale, size=(1, 1)).astype(dtype), requires_grad=True)
        self.w_v = Tensor(rng.uniform(-scale, scale, size=(1, 1)).astype(dtype), requires_grad=True)

    def layer_weights(self, stack: PyramidStack) -> Tensor:
        """Sigmoid-bounded weight per (snippet, layer); shape s x L."""
        cols = [T.sigmoid(self.weight_proj[l](stack.layers[l])) for l in range(stack.depth)]
        return T.concat(cols, axis=1)

    def __call__(self, stack_m: PyramidStack, stack_other: PyramidStack,
                 weight_override=None, return_layer_weights=False):
        if stack_m.depth != stack_other.depth:
            raise ContractError(
                f"pyramid depths differ: {stack_m.depth} vs {stack_other.depth}")
        if stack_m.depth != self.depth:
            raise ContractError(
                f"integration built for depth {self.depth}, got {stack_m.depth}")
        depth = stack_m.depth
        s = stack_m.layers[0].shape[0]
        w_m = self.layer_weights(stack_m)
        w_other = self.layer_weights(stack_other)

        rows = []
        for t in range(s):
            if weight_override is not None:
                modulated = T.constant(np.asarray(weight_override)[t : t + 1, :],
                                       dtype=stack_m.layers[0].dtype)
            else:
                q = T.matmul(T.transpose(T.slice_rows(w_m, t, t + 1)), self.w_q)
                k = T.matmul(T.transpose(T.slice_rows(w_other, t, t + 1)), self.w_k)
                v = T.matmul(T.transpose(T.slice_rows(w_other, t, t + 1)), self.w_v)
                scores = T.matmul(q, T.transpose(k))
                modulated = T.transpose(T.matmul(T.softmax(scores, axis=1), v))
            stacked = T.concat([T.slice_rows(stack_m.layers[l], t, t + 1) for l in range(depth)],
                               axis=0)
            rows.append(T.matmul(modulated, stacked))
        out = T.concat(rows, axis=0)
        if return_layer_weights:
            return out, w_m.data.copy()
        return out

    def parameters(self):
        out = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v}
        if self.shared_layer_weights:
            out["weight_proj.shared"] = self.weight_proj[0]
        else:
            for l, proj in enumerate(self.weight_proj):
                out[f"weight_proj.{l}"] = proj
        return out


def selective_integration(stack_m, stack_other, params: SelectiveIntegration, **kwargs):
    return params(stack_m, stack_other, **kwargs)


def lisf_forward(f_a, f_v, window, layers, integration):
    """Full local-level fusion: pyramid then selective integration per modality."""
    stack_a, stack_v = pyramid_forward(f_a, f_v, window, layers)
    e2_a = integration(stack_a, stack_v)
    e2_v = integration(stack_v, stack_a)
    return e2_a, e2_v


def lisf_parameters(layers, integration, prefix=""):
    out = {}
    for i, layer in enumerate(layers):
        out.update(collect_parameters(layer, prefix=f"{prefix}pyramid.{i}."))
    out.update(collect_parameters(integration, prefix=f"{prefix}integration."))
    return out
