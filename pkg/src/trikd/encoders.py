"""The three encoder views: pure conv, pure transformer and hybrid conv/transformer.

Each returns a four-stage `FeaturePyramid` at strides 4, 8, 16, 32.  The
transformer views also expose a row-stochastic `AttentionMap` (heads averaged)
for attention distillation, and the hybrid view exposes its stage-1 map for
low-level distillation through `LowLevelProjector`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import Tensor, ops
from .config import ModelConfig
from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    LayerNorm,
    Module,
    ResidualBlock,
    TransformerBlock,
    map_to_tokens,
    tokens_to_map,
    uniform_param,
)


@dataclass
class FeaturePyramid:
    stages: List[Tensor]
    schedule: List[tuple]  # declared (H_s, W_s, C_s) per stage

    def validate(self) -> "FeaturePyramid":
        if len(self.stages) != 4 or len(self.schedule) != 4:
            raise ValueError(f"pyramid needs 4 stages, got {len(self.stages)}")
        for s, (t, (h, w, c)) in enumerate(zip(self.stages, self.schedule)):
            if t.shape[1:] != (c, h, w):
                raise ValueError(f"stage {s + 1}: got (C, H, W)={t.shape[1:]}, declared {(c, h, w)}")
            if s and (h * 2, w * 2) != self.schedule[s - 1][:2]:
                raise ValueError(f"stage {s + 1} extent {(h, w)} is not half of stage {s}")
        return self

    @property
    def shapes(self) -> list:
        return [tuple(t.shape[2:]) + (t.shape[1],) for t in self.stages]


@dataclass
class AttentionMap:
    matrix: Tensor  # (B, N, N), heads averaged
    source: str
    layer: int

    def validate(self, tol: float = 1e-9) -> "AttentionMap":
        m = self.matrix.data
        if m.shape[-1] != m.shape[-2]:
            raise ValueError(f"attention map must be square, got {m.shape}")
        if np.any(m < 0) or np.any(m > 1) or np.max(np.abs(m.sum(axis=-1) - 1.0)) > tol:
            raise ValueError(f"{self.source} attention map (layer {self.layer}) is not row-stochastic")
        return self

    @property
    def tokens(self) -> int:
        return self.matrix.shape[-1]


def pyramid_schedule(image_size: int, widths) -> list:
    return [(image_size // (4 * 2**s), image_size // (4 * 2**s), int(c)) for s, c in enumerate(widths)]


def _check_input(x: Tensor, multiple: int = 32) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"encoder input must be (B, 3, H, W), got {x.shape}")
    H, W = x.shape[2:]
    if H % multiple or W % multiple:
        raise ValueError(f"input extents ({H}, {W}) must be divisible by {multiple}")


class ConvNetEncoder(Module):
    """Residual conv stages; stage s has stride 4*2^(s-1) and width C1*2^(s-1)."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        w = cfg.cnn_widths
        self.widths = tuple(w)
        self.stem1 = ConvBNReLU(3, max(w[0] // 2, 1), 3, 2, rng)
        self.stem2 = ConvBNReLU(max(w[0] // 2, 1), w[0], 3, 2, rng)
        self.downs = [ConvBNReLU(w[s - 1], w[s], 3, 2, rng) for s in range(1, 4)]
        self.blocks = [ResidualBlock(c, rng) for c in w]

    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x)
        h = self.stem2(self.stem1(x))
        stages = []
        for s in range(4):
            if s:
                h = self.downs[s - 1](h)
            h = self.blocks[s](h)
            stages.append(h)
        return FeaturePyramid(stages, pyramid_schedule(x.shape[2], self.widths)).validate()


class ViTEncoder(Module):
    """Patch embedding + pre-norm transformer stack; taps deserialised into a pyramid."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        P, D = cfg.vit_patch, cfg.vit_dim
        self.patch, self.dim, self.grid = P, D, cfg.vit_grid
        self.taps = cfg.vit_taps()
        self.widths = tuple(cfg.vit_widths)
        self.patch_embed = Conv2d(3, D, P, stride=P, padding=0, rng=rng, gain=1.0)
        self.pos = uniform_param((1, cfg.vit_tokens, D), D, rng, gain=0.1)
        self.blocks = [TransformerBlock(D, cfg.vit_heads, rng=rng) for _ in range(cfg.vit_depth)]
        self.tap_norms = [LayerNorm(D, rng) for _ in self.widths]
        self.necks = [Conv2d(D, c, 1, rng=rng) for c in self.widths]
        self.refine = []
        for s, c in enumerate(self.widths):
            if cfg.stage_extents[s] > self.grid:
                self.refine.append(ConvBNReLU(c, c, 3, 1, rng))
        self.image_size = cfg.image_size

    def embed(self, x: Tensor) -> Tensor:
        _check_input(x, self.patch)
        t = map_to_tokens(self.patch_embed(x))
        if t.shape[1] != self.pos.shape[1]:
            raise ValueError(f"token count {t.shape[1]} does not match the {self.pos.shape[1]} position embeddings")
        return ops.add(t, self.pos)

    def forward(self, x: Tensor):
        """Returns (per-layer tokens, tapped pyramid, last-layer AttentionMap)."""
        _check_input(x)
        t = self.embed(x)
        tokens, attn = [], None
        for blk in self.blocks:
            t, attn = blk(t)
            tokens.append(t)
        H = x.shape[2]
        stages, r = [], 0
        for s, layer in enumerate(self.taps):
            tapped = self.tap_norms[s](tokens[layer - 1])
            m = self.necks[s](tokens_to_map(tapped, self.grid, self.grid))
            target = H // (4 * 2**s)
            if target > self.grid:
                m = self.refine[r](ops.bilinear_upsample(m, target, target))
                r += 1
            elif target < self.grid:
                m = ops.max_pool2d(m, self.grid // target)
            stages.append(m)
        pyr = FeaturePyramid(stages, pyramid_schedule(H, self.widths)).validate()
        return tokens, pyr, AttentionMap(attn, "vit", len(self.blocks))


class HybridEncoder(Module):
    """Conv stage 1, then three downsample + transformer stages on serialised tokens."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        w = cfg.hyb_widths
        self.widths = tuple(w)
        self.stem1 = ConvBNReLU(3, max(w[0] // 2, 1), 3, 2, rng)
        self.stem2 = ConvBNReLU(max(w[0] // 2, 1), w[0], 3, 2, rng)
        self.block1 = ResidualBlock(w[0], rng)
        self.downs = [Conv2d(w[k - 1], w[k], 3, 2, bias=False, rng=rng) for k in range(1, 4)]
        self.down_bns = [BatchNorm2d(w[k], rng) for k in range(1, 4)]
        self.stages = [
            [TransformerBlock(w[k + 1], cfg.hyb_heads[k], rng=rng) for _ in range(cfg.hyb_depths[k])]
            for k in range(3)
        ]

    def _children(self):
        yield from super()._children()
        for k, blocks in enumerate(self.stages):
            for i, blk in enumerate(blocks):
                yield f"stage{k + 2}.{i}", blk

    def forward(self, x: Tensor):
        """Returns (pyramid, stage-4 AttentionMap, stage-1 feature map)."""
        _check_input(x)
        f1 = self.block1(self.stem2(self.stem1(x)))
        stages, h, attn = [f1], f1, None
        for k in range(3):
            h = self.down_bns[k](self.downs[k](h))
            hh, ww = h.shape[2:]
            t = map_to_tokens(h)
            for blk in self.stages[k]:
                t, attn = blk(t)
            h = tokens_to_map(t, hh, ww)
            stages.append(h)
        pyr = FeaturePyramid(stages, pyramid_schedule(x.shape[2], self.widths)).validate()
        return pyr, AttentionMap(attn, "hybrid", 4), f1


class LowLevelProjector(Module):
    """ReLU(BN(Conv1x1(F1_hyb))) with the conv view's stage-1 width."""

    def __init__(self, c_in: int, c_out: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out, rng)

    def forward(self, f1_hyb: Tensor, expected_hw: Optional[tuple] = None) -> Tensor:
        if expected_hw is not None and tuple(f1_hyb.shape[2:]) != tuple(expected_hw):
            raise ValueError(f"hybrid stage-1 extent {f1_hyb.shape[2:]} does not match conv stage-1 {expected_hw}")
        return ops.relu(self.bn(self.conv(f1_hyb)))


def encoder_parameter_counts(cfg: ModelConfig) -> dict:
    """Parameter totals per encoder, from a shape-only build (no storage allocated)."""
    return {
        "cnn": ConvNetEncoder(cfg).num_parameters(),
        "vit": ViTEncoder(cfg).num_parameters(),
        "hybrid": HybridEncoder(cfg).num_parameters(),
    }
