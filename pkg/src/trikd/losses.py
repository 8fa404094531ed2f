"""Training objectives: segmentation CE, tri-view cross pseudo supervision,
spatial and attention distillation, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .autodiff import Tensor, ops
from .encoders import AttentionMap

VIEWS = ("cnn", "vit", "hyb")


@dataclass(frozen=True)
class LossWeights:
    spa: float = 0.5
    att: float = 0.5
    cps: float = 0.1

    def __post_init__(self):
        for k in ("spa", "att", "cps"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {getattr(self, k)}")


@dataclass
class LossReport:
    seg: dict = field(default_factory=lambda: {v: 0.0 for v in VIEWS})
    cps: dict = field(default_factory=lambda: {v: 0.0 for v in VIEWS})
    spa: float = 0.0
    att: float = 0.0
    total: float = 0.0

    @property
    def seg_sum(self) -> float:
        return sum(self.seg[v] for v in VIEWS)

    @property
    def cps_sum(self) -> float:
        return sum(self.cps[v] for v in VIEWS)

    def row(self) -> dict:
        return {"seg": self.seg_sum, "cps": self.cps_sum, "spa": self.spa, "att": self.att, "total": self.total}


def seg_ce(pred: Tensor, gt: np.ndarray, ignore_index=None) -> Tensor:
    """Mean per-pixel CE of a probability map (B, C, H, W) against class indices (B, H, W)."""
    return ops.cross_entropy(pred, gt, ignore_index)


def pseudo_labels(pred: Tensor) -> np.ndarray:
    """Hard argmax targets from detached predictions (ties -> lowest class)."""
    return ops.argmax(pred.data, axis=1)


def cps_losses(p_cnn: Tensor, p_vit: Tensor, p_hyb: Tensor) -> dict:
    """Each view is supervised by the other two views' one-hot argmax maps."""
    preds = {"cnn": p_cnn, "vit": p_vit, "hyb": p_hyb}
    shapes = {p.shape for p in preds.values()}
    if len(shapes) != 1:
        raise ValueError(f"cps_losses: prediction shapes differ: {sorted(shapes)}")
    targets = {v: pseudo_labels(p) for v, p in preds.items()}
    out = {}
    for v in VIEWS:
        a, b = (o for o in VIEWS if o != v)
        out[v] = ops.add(ops.cross_entropy(preds[v], targets[a]), ops.cross_entropy(preds[v], targets[b]))
    return out


def spatial_loss(f_cnn: Tensor, f_proj: Tensor) -> Tensor:
    """Squared Frobenius distance per channel, normalised by H1*W1*C1 (and averaged over batch)."""
    if f_cnn.shape != f_proj.shape:
        raise ValueError(f"spatial_loss: shape mismatch {f_cnn.shape} vs {f_proj.shape}")
    return ops.mean(ops.square(ops.sub(f_cnn, f_proj)))


def _matrix(a: Union[AttentionMap, Tensor]) -> Tensor:
    m = a.matrix if isinstance(a, AttentionMap) else a
    if m.ndim == 2:
        m = ops.reshape(m, (1,) + m.shape)
    return m


def upsample_attention(a_hyb: Tensor, n: int) -> Tensor:
    """Bilinearly resize (B, L, L) attention to (B, n, n) and renormalise rows."""
    up = ops.bilinear_upsample(a_hyb, n, n)
    return ops.div(up, ops.sum(up, axis=-1, keepdims=True))


def attention_loss(a_vit: Union[AttentionMap, Tensor], a_hyb: Union[AttentionMap, Tensor], tol: float = 1e-6) -> Tensor:
    """KL(A_vit || Upsample(A_hyb)) / N^2, averaged over the batch."""
    p, q = _matrix(a_vit), _matrix(a_hyb)
    for name, m in (("vit", p), ("hybrid", q)):
        d = m.data
        if np.any(d < -tol) or np.max(np.abs(d.sum(axis=-1) - 1.0)) > tol:
            raise ValueError(f"attention_loss: {name} attention is not row-stochastic")
    B, N = p.shape[0], p.shape[-1]
    if q.shape[0] != B:
        raise ValueError(f"attention_loss: batch sizes differ ({B} vs {q.shape[0]})")
    if q.shape[-1] > N:
        raise ValueError(f"attention_loss: hybrid tokens {q.shape[-1]} exceed vit tokens {N}")
    q_up = upsample_attention(q, N)
    return ops.mul(ops.kl_divergence(p, q_up), 1.0 / (N * N * B))


def total_loss(seg, spa, att, cps, w: LossWeights = LossWeights(), mode: str = "semi"):
    """seg + l1*spa + l2*att + l*cps; the CPS term is dropped in supervised mode.

    ``seg`` and ``cps`` are the sums over the three views.  Works on floats and tensors.
    """
    if mode not in ("semi", "supervised"):
        raise ValueError(f"mode must be semi or supervised, got {mode!r}")
    if min(w.spa, w.att, w.cps) < 0:
        raise ValueError("loss weights must be non-negative")
    total = seg + w.spa * spa + w.att * att
    if mode == "semi":
        total = total + w.cps * cps
    return total
