"""Dual-frequency decoder.

Stages 1-2 are gated by high-pass spectral channel attention, stage 3 by
low-pass; each gated map is concatenated with its input and reduced by a 1x1
conv.  Stage 4 goes through a pyramid pooling module.  A top-down additive
pathway fuses the four levels and a 1x1 head produces per-pixel class
probabilities at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, fft2, fftshift, ops
from .nn import Conv2d, Module

LOW, HIGH = "low", "high"
MAG_EPS = 1e-12


@dataclass(frozen=True)
class FilterMask:
    kind: str
    cutoff: float
    matrix: np.ndarray


@lru_cache(maxsize=None)
def _lowpass(D0: float, H: int, W: int) -> np.ndarray:
    u = np.arange(H, dtype=np.float64)[:, None] - H // 2
    v = np.arange(W, dtype=np.float64)[None, :] - W // 2
    m = np.exp(-(u * u + v * v) / (2.0 * D0 * D0))
    m.setflags(write=False)
    return m


def gaussian_filter(kind: str, D0: float, H: int, W: int) -> FilterMask:
    """Gaussian low/high-pass mask centred on the shifted DC bin (H/2, W/2)."""
    if not D0 > 0:
        raise ValueError(f"cutoff D0 must be > 0, got {D0}")
    if H % 2 or W % 2:
        raise ValueError(f"filter extents ({H}, {W}) must be even")
    lp = _lowpass(float(D0), int(H), int(W))
    if kind == LOW:
        return FilterMask(LOW, float(D0), lp)
    if kind == HIGH:
        return FilterMask(HIGH, float(D0), 1.0 - lp)
    raise ValueError(f"filter kind must be 'low' or 'high', got {kind!r}")


def default_cutoff(H: int, W: int) -> float:
    return min(H, W) / 4.0


def spectral_scores(F: Tensor, mask: np.ndarray) -> Tensor:
    """GAP of the masked, shifted magnitude spectrum: one score per (batch, channel)."""
    X = fftshift(fft2(F)).scale(mask)
    return ops.mean(X.abs(MAG_EPS), axis=(2, 3))


class FreqChannelGate(Module):
    """R = sigmoid(Conv1x1(z)) * F with z the filtered spectral channel score."""

    def __init__(self, channels: int, kind: str, cutoff: Optional[float] = None, rng=None):
        super().__init__()
        if kind not in (LOW, HIGH):
            raise ValueError(f"filter kind must be 'low' or 'high', got {kind!r}")
        self.kind, self.cutoff = kind, cutoff
        self.conv = Conv2d(channels, channels, 1, rng=rng, zero_init=True)

    def mask(self, H: int, W: int) -> FilterMask:
        return gaussian_filter(self.kind, self.cutoff or default_cutoff(H, W), H, W)

    def scores(self, F: Tensor) -> Tensor:
        H, W = F.shape[2:]
        if H % 2 or W % 2:
            raise ValueError(f"frequency gate needs even extents, got ({H}, {W})")
        return spectral_scores(F, self.mask(H, W).matrix)

    def forward(self, F: Tensor) -> Tensor:
        z = self.scores(F)
        B, C = z.shape
        gate = ops.sigmoid(self.conv(ops.reshape(z, (B, C, 1, 1))))
        return ops.mul(F, gate)


class StageReduce(Module):
    """Concat(F, R) along channels, then 1x1 conv to the reduced width."""

    def __init__(self, channels: int, out_channels: int, rng=None):
        super().__init__()
        self.channels = channels
        self.conv = Conv2d(2 * channels, out_channels, 1, rng=rng, gain=1.0)

    def forward(self, F: Tensor, R: Tensor) -> Tensor:
        if F.shape != R.shape:
            raise ValueError(f"stage_reduce: feature {F.shape} and gated map {R.shape} differ")
        if F.shape[1] != self.channels:
            raise ValueError(f"stage_reduce: expected {self.channels} channels, got {F.shape[1]}")
        return self.conv(ops.concat([F, R], axis=1))


class PPM(Module):
    """Pyramid pooling: adaptive average pools (bins clamped to the extent), 1x1 convs, upsample, concat, reduce."""

    def __init__(self, channels: int, out_channels: int, bins: Sequence[int] = (1, 2, 3, 6), rng=None):
        super().__init__()
        self.bins = tuple(bins)
        branch = max(channels // 4, 1)
        self.branches = [Conv2d(channels, branch, 1, rng=rng) for _ in self.bins]
        self.bottleneck = Conv2d(channels + branch * len(self.bins), out_channels, 1, rng=rng)

    def effective_bins(self, H: int, W: int) -> tuple:
        return tuple(min(b, H, W) for b in self.bins)

    def forward(self, F4: Tensor) -> Tensor:
        H, W = F4.shape[2:]
        parts = [F4]
        for b, conv in zip(self.effective_bins(H, W), self.branches):
            pooled = ops.adaptive_avg_pool2d(F4, b)
            parts.append(ops.bilinear_upsample(ops.relu(conv(pooled)), H, W))
        return ops.relu(self.bottleneck(ops.concat(parts, axis=1)))


class FusePredict(Module):
    """Top-down additive fusion of coarse->fine maps, then class head, upsample and softmax."""

    def __init__(self, widths_coarse_to_fine: Sequence[int], num_classes: int, rng=None):
        super().__init__()
        w = tuple(widths_coarse_to_fine)
        self.widths = w
        self.match = [Conv2d(w[i - 1], w[i], 1, rng=rng, gain=1.0) for i in range(1, len(w))]
        # near-zero head so training starts from almost uniform class probabilities
        self.head = Conv2d(w[-1], num_classes, 1, rng=rng, gain=1e-2)

    def logits(self, maps: Sequence[Tensor], out_hw: tuple) -> Tensor:
        if len(maps) != len(self.widths):
            raise ValueError(f"expected {len(self.widths)} maps, got {len(maps)}")
        for m, c in zip(maps, self.widths):
            if m.shape[1] != c:
                raise ValueError(f"fusion width mismatch: map has {m.shape[1]} channels, declared {c}")
        p = maps[0]
        for conv, finer in zip(self.match, maps[1:]):
            # 1x1 conv and bilinear resize commute, so the cheaper order is used
            up = ops.bilinear_upsample(conv(p), *finer.shape[2:])
            if up.shape != finer.shape:
                raise ValueError(f"fusion: matched map {up.shape} vs finer map {finer.shape}")
            p = ops.add(up, finer)
        return ops.bilinear_upsample(self.head(p), *out_hw)

    def forward(self, maps: Sequence[Tensor], out_hw: tuple) -> Tensor:
        return ops.softmax(self.logits(maps, out_hw), axis=1)


class DFDecoder(Module):
    def __init__(self, widths: Sequence[int], reduce: Sequence[int], num_classes: int,
                 ppm_bins=(1, 2, 3, 6), cutoff: Optional[float] = None, rng=None):
        super().__init__()
        widths = tuple(widths)
        self.gates = [
            FreqChannelGate(widths[0], HIGH, cutoff, rng),
            FreqChannelGate(widths[1], HIGH, cutoff, rng),
            FreqChannelGate(widths[2], LOW, cutoff, rng),
        ]
        self.reduces = [StageReduce(widths[s], reduce[s], rng) for s in range(3)]
        self.ppm = PPM(widths[3], reduce[2], ppm_bins, rng)
        self.fuse = FusePredict((reduce[2], reduce[2], reduce[1], reduce[0]), num_classes, rng)

    def stage_maps(self, stages: Sequence[Tensor]) -> list:
        """Reduced maps ordered coarse -> fine."""
        reduced = [self.reduces[s](stages[s], self.gates[s](stages[s])) for s in range(3)]
        return [self.ppm(stages[3]), reduced[2], reduced[1], reduced[0]]

    def forward(self, stages: Sequence[Tensor], out_hw: tuple) -> Tensor:
        return self.fuse(self.stage_maps(stages), out_hw)
