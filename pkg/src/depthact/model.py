"""Full two-stream architecture and its ablation variants.

Stream A: RGB side features x side-network depth features.
Stream B: RGB side features x SSM-branch depth features.
Fusion happens at the frame level (patch tokens mean-pooled per frame)
through bidirectional gated cross-attention; the two stream heads are
averaged at the score level. The RGB side features are computed once and
shared by both streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders, fusion
from .errors import ContractError
from .nnops import linear
from .tensor import Tensor

ABLATION_MODES = ("rgb_only", "rgb_depth", "rgb_depth_mamba")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 64
    width: int = 64
    num_classes: int = 6
    patch_size: int = 16
    backbone_dim: int = 32
    backbone_layers: int = 4
    backbone_heads: int = 4
    side_dim: int = 16
    side_heads: int = 2
    ssm_state: int = 8
    ssm_expand: int = 2
    ssm_blocks: int = 2
    ssm_conv: int = 4
    fusion_layers: int = 1
    fusion_heads: int = 2
    mode: str = "rgb_depth_mamba"

    @property
    def patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)


class ActionModel:
    """Holds all parameters and builds the forward graph per batch."""

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.mode not in ABLATION_MODES:
            raise ContractError(f"unknown ablation mode {cfg.mode!r}, expected one of {ABLATION_MODES}")
        if cfg.height % cfg.patch_size or cfg.width % cfg.patch_size:
            raise ContractError(f"frame size {cfg.height}x{cfg.width} not divisible by patch {cfg.patch_size}")
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7]))
        d = cfg.side_dim
        self.backbone = encoders.init_backbone(
            rng, cfg.backbone_dim, cfg.backbone_layers, cfg.backbone_heads,
            cfg.patch_size, cfg.frames, cfg.patches)
        self.side_rgb = encoders.init_sidenet(rng, cfg.backbone_dim, d, cfg.backbone_layers, cfg.side_heads)
        self.side_depth = None
        self.ssm = None
        self.gca_a = None
        self.gca_b = None
        self.head_a = None
        self.head_b = None
        self.head_rgb = None
        if cfg.mode == "rgb_only":
            w = Tensor(rng.normal(0.0, 0.02, size=(d, cfg.num_classes)), requires_grad=True)
            b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
            self.head_rgb = (w, b)
        else:
            self.side_depth = encoders.init_sidenet(rng, cfg.backbone_dim, d, cfg.backbone_layers, cfg.side_heads)
            self.gca_a = (fusion.init_gca(rng, d, cfg.fusion_heads, cfg.fusion_layers),
                          fusion.init_gca(rng, d, cfg.fusion_heads, cfg.fusion_layers))
            self.head_a = fusion.init_stream_head(rng, d, cfg.num_classes)
            if cfg.mode == "rgb_depth_mamba":
                self.ssm = encoders.init_ssm(rng, cfg.backbone_dim, d, cfg.ssm_blocks,
                                             cfg.ssm_state, cfg.ssm_expand, cfg.ssm_conv)
                self.gca_b = (fusion.init_gca(rng, d, cfg.fusion_heads, cfg.fusion_layers),
                              fusion.init_gca(rng, d, cfg.fusion_heads, cfg.fusion_layers))
                self.head_b = fusion.init_stream_head(rng, d, cfg.num_classes)
        self._trainable = dict(self._iter_trainable())

    def _iter_trainable(self):
        yield from self.side_rgb.named_tensors("side_rgb")
        if self.side_depth is not None:
            yield from self.side_depth.named_tensors("side_depth")
        if self.ssm is not None:
            yield from self.ssm.named_tensors("ssm")
        if self.gca_a is not None:
            yield from self.gca_a[0].named_tensors("gca_a/rgb_query")
            yield from self.gca_a[1].named_tensors("gca_a/depth_query")
            yield from self.head_a.named_tensors("head_a")
        if self.gca_b is not None:
            yield from self.gca_b[0].named_tensors("gca_b/rgb_query")
            yield from self.gca_b[1].named_tensors("gca_b/depth_query")
            yield from self.head_b.named_tensors("head_b")
        if self.head_rgb is not None:
            yield "head_rgb/w", self.head_rgb[0]
            yield "head_rgb/b", self.head_rgb[1]

    def trainable_params(self) -> dict:
        return self._trainable

    def frozen_params(self) -> dict:
        return dict(self.backbone.named_tensors())

    def named_params(self) -> dict:
        out = dict(self.backbone.named_tensors())
        out.update(self._trainable)
        return out

    def num_trainable(self) -> int:
        return sum(t.size for t in self._trainable.values())

    def zero_grad(self) -> None:
        for t in self._trainable.values():
            t.grad = None

    def compute_acts(self, frames: np.ndarray, depth: np.ndarray | None):
        """Frozen-path activations for both modalities (plain arrays).
        Deterministic per clip, so callers may cache and re-stack them."""
        ts = encoders.patch_embed(frames, self.backbone)
        rgb_acts = encoders.frozen_forward(ts, self.backbone)
        if depth is None:
            return rgb_acts, None
        dts = encoders.patch_embed(encoders.depth_to_frames(depth), self.backbone)
        return rgb_acts, encoders.frozen_forward(dts, self.backbone)

    def forward(self, frames: np.ndarray, depth: np.ndarray | None, use_fusion: bool = True) -> dict:
        """Per-batch forward. Returns a dict with per-stream logits and the
        fused score vector (all Tensors)."""
        if self.cfg.mode != "rgb_only" and depth is None:
            raise ContractError(f"mode {self.cfg.mode!r} requires depth input")
        rgb_acts, dep_acts = self.compute_acts(frames, depth if self.cfg.mode != "rgb_only" else None)
        return self.forward_from_acts(rgb_acts, dep_acts, use_fusion=use_fusion)

    def forward_from_acts(self, rgb_acts: list, dep_acts: list | None,
                          use_fusion: bool = True) -> dict:
        cfg = self.cfg
        t, p = cfg.frames, cfg.patches
        _, rgb_frame, rgb_pooled = encoders.side_forward_tokens(rgb_acts, self.side_rgb, t, p)
        if cfg.mode == "rgb_only":
            w, b = self.head_rgb
            logits = linear(rgb_pooled, w, b)
            return {"logits_a": logits, "logits_b": None, "fused": logits}

        if dep_acts is None:
            raise ContractError(f"mode {cfg.mode!r} requires depth activations")
        _, dep_frame, _ = encoders.side_forward_tokens(dep_acts, self.side_depth, t, p)
        if use_fusion:
            rgb_ctx, dep_ctx = fusion.bidirectional_fuse(rgb_frame, dep_frame, *self.gca_a)
        else:
            rgb_ctx, dep_ctx = rgb_frame, dep_frame
        logits_a = fusion.stream_logits(rgb_ctx, dep_ctx, self.head_a)
        if cfg.mode == "rgb_depth":
            return {"logits_a": logits_a, "logits_b": None, "fused": logits_a}

        dep_ts = encoders.TokenSequence(tokens=Tensor(dep_acts[0]), frames=t, patches=p,
                                        dim=cfg.backbone_dim)
        _, mam_frame, _ = encoders.mamba_encode_tokens(dep_ts, self.ssm)
        if use_fusion:
            rgb_ctx_b, mam_ctx = fusion.bidirectional_fuse(rgb_frame, mam_frame, *self.gca_b)
        else:
            rgb_ctx_b, mam_ctx = rgb_frame, mam_frame
        logits_b = fusion.stream_logits(rgb_ctx_b, mam_ctx, self.head_b)
        return {"logits_a": logits_a, "logits_b": logits_b,
                "fused": fusion.mean_fuse(logits_a, logits_b)}
