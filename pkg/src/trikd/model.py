from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .config import ModelConfig
from .decoder import DFDecoder
from .encoders import AttentionMap, ConvNetEncoder, HybridEncoder, LowLevelProjector, ViTEncoder
from .nn import Module


@dataclass
class TriViewOutput:
    probs: dict  # view -> (B, C, H, W) probabilities
    f1_cnn: Tensor
    f1_proj: Tensor
    att_vit: AttentionMap
    att_hyb: AttentionMap


class TriKD(Module):
    """Three encoder views, one dual-frequency decoder per view, and the low-level projector.

    Only ``hyb`` and ``dec_hyb`` take part in `predict`.
    """

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cfg = cfg
        kw = dict(num_classes=cfg.num_classes, ppm_bins=cfg.ppm_bins, cutoff=cfg.filter_cutoff, rng=rng)
        self.cnn = ConvNetEncoder(cfg, rng)
        self.vit = ViTEncoder(cfg, rng)
        self.hyb = HybridEncoder(cfg, rng)
        self.dec_cnn = DFDecoder(cfg.cnn_widths, cfg.cnn_reduce, **kw)
        self.dec_vit = DFDecoder(cfg.vit_widths, cfg.vit_reduce, **kw)
        self.dec_hyb = DFDecoder(cfg.hyb_widths, cfg.hyb_reduce, **kw)
        self.proj = LowLevelProjector(cfg.hyb_widths[0], cfg.cnn_widths[0], rng)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "TriKD":
        return cls(cfg, np.random.default_rng(seed))

    def groups(self) -> dict:
        return {
            "cnn": (self.cnn, self.dec_cnn),
            "vit": (self.vit, self.dec_vit),
            "hyb": (self.hyb, self.dec_hyb, self.proj),
        }

    def forward(self, x: Tensor) -> TriViewOutput:
        hw = tuple(x.shape[2:])
        pyr_c = self.cnn(x)
        _, pyr_v, att_v = self.vit(x)
        pyr_h, att_h, f1_h = self.hyb(x)
        probs = {
            "cnn": self.dec_cnn(pyr_c.stages, hw),
            "vit": self.dec_vit(pyr_v.stages, hw),
            "hyb": self.dec_hyb(pyr_h.stages, hw),
        }
        f1_c = pyr_c.stages[0]
        f1_p = self.proj(f1_h, expected_hw=tuple(f1_c.shape[2:]))
        return TriViewOutput(probs, f1_c, f1_p, att_v, att_h)

    def predict_proba(self, x) -> np.ndarray:
        """Inference path: hybrid encoder and its decoder only, in eval mode."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        was = self.hyb.training
        self.hyb.eval()
        self.dec_hyb.eval()
        try:
            with no_grad():
                pyr, _, _ = self.hyb(x)
                return self.dec_hyb(pyr.stages, tuple(x.shape[2:])).data
        finally:
            self.hyb.train(was)
            self.dec_hyb.train(was)

    def predict(self, x) -> np.ndarray:
        return ops.argmax(self.predict_proba(x), axis=1)
