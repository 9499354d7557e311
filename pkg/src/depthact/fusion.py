"""Bidirectional gated cross-attention fusion and score-level mean fusion.

Each direction is a residual cross-attention block whose output is scaled
by tanh of a per-channel gate initialized at zero, so an untrained fusion
stack is exactly the identity on both feature streams.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tt
from .errors import ShapeError
from .nnops import linear, mha_block, ones_param, param, zeros_param
from .tensor import Tensor


@dataclass
class GCAParams:
    layers: list  # per layer: norms, projections, gate vector alpha
    dim: int
    heads: int

    def named_tensors(self, prefix: str):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer):
                yield f"{prefix}/layer{i}/{key}", layer[key]


def init_gca(rng, dim: int, heads: int = 2, num_layers: int = 1) -> GCAParams:
    layers = []
    for _ in range(num_layers):
        layers.append({
            "ln_q_g": ones_param((dim,)), "ln_q_b": zeros_param((dim,)),
            "ln_c_g": ones_param((dim,)), "ln_c_b": zeros_param((dim,)),
            "wq": param(rng, (dim, dim)), "wk": param(rng, (dim, dim)),
            "wv": param(rng, (dim, dim)), "wo": param(rng, (dim, dim)),
            "alpha": zeros_param((dim,)),  # gate closed at init
        })
    return GCAParams(layers=layers, dim=dim, heads=heads)


def gated_cross_attention(query_feats: Tensor, context_feats: Tensor, params: GCAParams) -> Tensor:
    """query + tanh(alpha) * MHA(LN(query); LN(context))."""
    if query_feats.shape[-1] != params.dim or context_feats.shape[-1] != params.dim:
        raise ShapeError(
            f"gated cross-attention built for dim {params.dim}, got query {query_feats.shape} "
            f"and context {context_feats.shape}"
        )
    out = query_feats
    for layer in params.layers:
        attn = mha_block(out, context_feats, layer, params.heads)
        out = tt.add(out, tt.mul(tt.tanh(layer["alpha"]), attn))
    return out


def bidirectional_fuse(rgb_feats: Tensor, depth_feats: Tensor,
                       rgb_query_params: GCAParams, depth_query_params: GCAParams):
    """Both directions read the same unmodified inputs; evaluation order is
    immaterial. Returns (rgb_ctx, depth_ctx)."""
    rgb_ctx = gated_cross_attention(rgb_feats, depth_feats, rgb_query_params)
    depth_ctx = gated_cross_attention(depth_feats, rgb_feats, depth_query_params)
    return rgb_ctx, depth_ctx


@dataclass
class StreamHead:
    w: Tensor  # (2d, num_classes)
    b: Tensor  # (num_classes,)

    def named_tensors(self, prefix: str):
        yield f"{prefix}/w", self.w
        yield f"{prefix}/b", self.b


def init_stream_head(rng, dim: int, num_classes: int) -> StreamHead:
    return StreamHead(w=param(rng, (2 * dim, num_classes)), b=zeros_param((num_classes,)))


def stream_logits(rgb_ctx: Tensor, depth_ctx: Tensor, head: StreamHead) -> Tensor:
    """Mean-pool each contextualized token set, concatenate, linear head."""
    pooled = tt.concat([tt.mean_(rgb_ctx, axis=1), tt.mean_(depth_ctx, axis=1)], axis=-1)
    return linear(pooled, head.w, head.b)


def mean_fuse(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Elementwise mean of the two stream score vectors."""
    if logits_a.shape != logits_b.shape:
        raise ShapeError(f"mean_fuse: shape mismatch {logits_a.shape} vs {logits_b.shape}")
    return tt.mul(tt.add(logits_a, logits_b), 0.5)
