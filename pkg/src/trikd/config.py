"""Model presets, training configuration and the ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str
    image_size: int
    num_classes: int
    cnn_widths: tuple
    vit_patch: int
    vit_dim: int
    vit_depth: int
    vit_heads: int
    vit_widths: tuple
    hyb_widths: tuple
    hyb_depths: tuple
    hyb_heads: tuple
    cnn_reduce: tuple
    vit_reduce: tuple
    hyb_reduce: tuple
    ppm_bins: tuple = (1, 2, 3, 6)
    filter_cutoff: Optional[float] = None  # None: min(H, W) / 4 of each gated stage

    @property
    def stage_extents(self) -> tuple:
        return tuple(self.image_size // (4 * 2**s) for s in range(4))

    @property
    def vit_grid(self) -> int:
        return self.image_size // self.vit_patch

    @property
    def vit_tokens(self) -> int:
        return self.vit_grid**2

    def vit_taps(self) -> tuple:
        """Layer indices (1-based) at the quarter points of the stack."""
        return tuple(round(self.vit_depth * q / 4) for q in range(1, 5))

    def validate(self) -> None:
        if self.image_size % 32:
            raise ConfigError(f"image_size={self.image_size} must be divisible by 32")
        if self.image_size % self.vit_patch:
            raise ConfigError(f"vit_patch={self.vit_patch} must divide image_size={self.image_size}")
        if self.vit_dim % self.vit_heads:
            raise ConfigError(f"vit_heads={self.vit_heads} must divide vit_dim={self.vit_dim}")
        for w, h in zip(self.hyb_widths[1:], self.hyb_heads):
            if w % h:
                raise ConfigError(f"hybrid heads {h} must divide width {w}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")


DESK = ModelConfig(
    name="desk",
    image_size=64,
    num_classes=4,
    cnn_widths=(16, 32, 64, 128),
    vit_patch=8,
    vit_dim=64,
    vit_depth=4,
    vit_heads=4,
    vit_widths=(16, 32, 64, 128),
    hyb_widths=(16, 32, 64, 128),
    hyb_depths=(1, 1, 1),
    hyb_heads=(4, 4, 4),
    cnn_reduce=(16, 32, 32),
    vit_reduce=(12, 24, 48),
    hyb_reduce=(12, 24, 48),
)

# Full-scale schedule; used for shape accounting only, never allocated.
FULL = ModelConfig(
    name="full",
    image_size=512,
    num_classes=21,
    cnn_widths=(256, 512, 1024, 2048),
    vit_patch=16,
    vit_dim=768,
    vit_depth=12,
    vit_heads=12,
    vit_widths=(64, 128, 256, 448),
    hyb_widths=(64, 128, 256, 448),
    hyb_depths=(2, 6, 2),
    hyb_heads=(4, 8, 14),
    cnn_reduce=(128, 256, 256),
    vit_reduce=(48, 96, 192),
    hyb_reduce=(48, 96, 192),
)

PRESETS = {"desk": DESK, "full": FULL}


def get_preset(name: str, num_classes: Optional[int] = None) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if num_classes is not None and num_classes != cfg.num_classes:
        cfg = dataclasses.replace(cfg, num_classes=num_classes)
    cfg.validate()
    return cfg


@dataclass
class TrainConfig:
    lr: float = field(default=0.01, metadata={"help": "initial learning rate"})
    momentum: float = field(default=0.9, metadata={"help": "SGD momentum"})
    weight_decay: float = field(default=1e-4, metadata={"help": "L2 weight decay added to the gradient"})
    power: float = field(default=0.9, metadata={"help": "poly learning-rate decay exponent"})
    epochs: int = field(default=30, metadata={"help": "passes over the labeled set"})
    batch_size: int = field(default=8, metadata={"help": "images per step, split equally labeled/unlabeled in semi mode"})
    lambda_spa: float = field(default=0.5, metadata={"help": "weight of the spatial distillation loss"})
    lambda_att: float = field(default=0.5, metadata={"help": "weight of the attention distillation loss"})
    lambda_cps: float = field(default=0.1, metadata={"help": "weight of the cross pseudo supervision loss"})
    label_ratio: float = field(default=0.5, metadata={"help": "fraction of the training set with labels (1/16 accepted)"})
    seed: int = field(default=0, metadata={"help": "seed for initialisation, splits, batching and augmentation"})
    mode: str = field(default="semi", metadata={"help": "semi | supervised"})
    freeze_teachers: bool = field(default=False, metadata={"help": "stop distillation gradients into the conv/vit encoders"})
    preset: str = field(default="desk", metadata={"help": "desk | full (full is shape-only)"})
    num_classes: int = field(default=4, metadata={"help": "classes including background"})
    dataset_size: int = field(default=320, metadata={"help": "synthetic training images when no dataset dir is given"})
    eval_size: int = field(default=64, metadata={"help": "held-out synthetic images for evaluation"})
    augment: bool = field(default=True, metadata={"help": "flip/scale/rotate/crop augmentation"})
    max_steps: int = field(default=0, metadata={"help": "stop after this many steps (0 = full schedule)"})
    eval_every: int = field(default=0, metadata={"help": "evaluate every N epochs (0 = only at the end)"})
    checkpoint_every: int = field(default=0, metadata={"help": "checkpoint every N steps (0 = only at the end)"})
    ignore_index: int = field(default=255, metadata={"help": "label value excluded from losses and metrics"})

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not self.power > 0:
            raise ConfigError(f"power must be > 0, got {self.power}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in ("semi", "supervised"):
            raise ConfigError(f"mode must be semi or supervised, got {self.mode!r}")
        if not 0 < self.label_ratio <= 1:
            raise ConfigError(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        for k in ("lambda_spa", "lambda_att", "lambda_cps", "weight_decay", "momentum"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative, got {getattr(self, k)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        return self

    def model_config(self) -> ModelConfig:
        return get_preset(self.preset, self.num_classes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(Fraction(raw)) if "/" in raw else float(raw)
        return raw
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def schema() -> dict:
    """key -> (type, default, help) for every accepted training key."""
    return {f.name: (f.type, f.default, f.metadata.get("help", "")) for f in fields(TrainConfig)}


def parse_pairs(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def build_config(pairs: dict, base: Optional[TrainConfig] = None) -> TrainConfig:
    sch = schema()
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for k, v in pairs.items():
        if k not in sch:
            raise ConfigError(f"unknown config key {k!r}")
        setattr(cfg, k, parse_value(k, v, sch[k][0]) if isinstance(v, str) else v)
    return cfg.validate()


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return build_config(parse_pairs(fh.read()))
