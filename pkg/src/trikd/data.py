"""Procedural shape-segmentation data: generation, labeled/unlabeled splits,
geometric augmentation and the netpbm on-disk layout."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .autodiff.ops import bilinear_weights

BACKGROUND = 0
IGNORE = 255
SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring")
EVAL_ID_OFFSET = 1_000_000

# class k (1-based) is drawn around BASE_COLORS[k - 1]
BASE_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
])


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 4
    min_radius: float = 7.0
    max_radius: float = 16.0
    color_jitter: float = 0.35
    noise_amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPE_KINDS) + 1:
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}], got {self.num_classes}")
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ValueError(f"bad shape count range [{self.min_shapes}, {self.max_shapes}]")
        if self.size < 8:
            raise ValueError(f"size must be >= 8, got {self.size}")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in kinds:
                raise ValueError(f"unknown spec key {k!r}")
            vals[k] = float(v) if kinds[k] in (float, "float") else int(v)
        return cls(**vals)


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    radius: float
    color: tuple
    aspect: float = 1.0
    angle: float = 0.0


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    label: np.ndarray  # (H, W) uint8
    id: int


def shape_mask(shape: Shape, H: int, W: int) -> np.ndarray:
    """Pixels whose centres fall inside ``shape``."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    dx, dy = xx - shape.cx, yy - shape.cy
    r = shape.radius
    if shape.kind == "disk":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    c, s = math.cos(shape.angle), math.sin(shape.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape.kind == "rectangle":
        hw = r * math.sqrt(shape.aspect)
        hh = r / math.sqrt(shape.aspect)
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if shape.kind == "triangle":
        inside = np.ones((H, W), dtype=bool)
        for k in range(3):
            a = shape.angle + 2 * math.pi * k / 3 + math.pi / 2
            nx, ny = math.cos(a), math.sin(a)
            # edge k has outward normal (nx, ny) at distance r/2 from the centre
            inside &= dx * nx + dy * ny <= 0.5 * r
        return inside
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def smooth_background(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    base = rng.uniform(0.3, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.uniform(-1.0, 1.0, size=(3, 4, 4))
    M = bilinear_weights(4, size)
    noise = M @ coarse @ M.T
    return base + tint[:, None, None] + amplitude * noise


def random_shapes(rng: np.random.Generator, spec: SceneSpec) -> List[Tuple[int, Shape]]:
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    out = []
    for _ in range(n):
        cls = int(rng.integers(1, spec.num_classes))
        r = float(rng.uniform(spec.min_radius, spec.max_radius))
        cx, cy = rng.uniform(0.0, spec.size, size=2)
        color = np.clip(BASE_COLORS[cls - 1] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0.0, 1.0)
        aspect = float(rng.uniform(0.5, 2.0))
        angle = float(rng.uniform(0.0, 2 * math.pi))
        out.append((cls, Shape(SHAPE_KINDS[cls - 1], float(cx), float(cy), r, tuple(color), aspect, angle)))
    return out


def render(shapes: Sequence[Tuple[int, Shape]], background: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Paint shapes back-to-front; later shapes occlude earlier ones."""
    image = background.copy()
    H, W = image.shape[1:]
    label = np.full((H, W), BACKGROUND, dtype=np.uint8)
    for cls, shp in shapes:
        m = shape_mask(shp, H, W)
        image[:, m] = np.asarray(shp.color)[:, None]
        label[m] = cls
    return quantize(image), label


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so in-memory and on-disk samples agree exactly."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_sample(seed: int, spec: SceneSpec, sample_id: int = 0, shapes=None) -> Sample:
    """Deterministic in (seed, sample_id); ``shapes`` overrides the random layout."""
    rng = np.random.default_rng([int(seed), int(sample_id)])
    bg = smooth_background(rng, spec.size, spec.noise_amplitude)
    if shapes is None:
        shapes = random_shapes(rng, spec)
    image, label = render(shapes, bg)
    return Sample(image, label, int(sample_id))


def generate_dataset(spec: SceneSpec, count: int, offset: int = 0) -> List[Sample]:
    return [generate_sample(spec.seed, spec, offset + i) for i in range(count)]


def class_histogram(samples: Iterable[Sample], num_classes: int) -> np.ndarray:
    hist = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        hist += np.bincount(s.label.reshape(-1), minlength=IGNORE + 1)[:num_classes]
    return hist


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_counts(size: int, ratio: float) -> Tuple[int, int]:
    if not 0 < ratio <= 1:
        raise ValueError(f"label ratio must be in (0, 1], got {ratio}")
    n_l = int(math.floor(ratio * size + 0.5))
    return n_l, size - n_l


def split(size: int, ratio: float, seed: int) -> Tuple[List[int], List[int]]:
    """Disjoint, exhaustive, seed-deterministic (labeled, unlabeled) index lists."""
    n_l, _ = split_counts(size, ratio)
    perm = np.random.default_rng([int(seed), 0x5EED]).permutation(size)
    return sorted(int(i) for i in perm[:n_l]), sorted(int(i) for i in perm[n_l:])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    scale: float = 1.0
    angle_deg: float = 0.0
    offset: Optional[Tuple[int, int]] = None  # crop origin; None = centred


def sample_augment_params(rng: np.random.Generator, scale_range=(0.5, 2.0), max_angle=10.0) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    scale = float(rng.uniform(*scale_range))
    angle = float(rng.uniform(-max_angle, max_angle))
    return AugmentParams(flip, scale, angle, None)


def apply_augment(s: Sample, p: AugmentParams, crop: int, rng: Optional[np.random.Generator] = None,
                  ignore_index: int = IGNORE) -> Sample:
    """Flip, then scale+rotate about the centre, then crop (pad with background if short).

    Images are resampled bilinearly with edge clamping; labels by nearest
    neighbour, with pixels rotated in from outside the frame set to ``ignore_index``.
    """
    image, label = s.image, s.label
    if p.flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    H, W = label.shape
    Ho, Wo = max(1, int(round(H * p.scale))), max(1, int(round(W * p.scale)))
    if p.scale == 1.0 and p.angle_deg == 0.0:
        image, label = np.ascontiguousarray(image), np.ascontiguousarray(label)
    else:
        th = math.radians(p.angle_deg)
        c, sn = math.cos(th), math.sin(th)
        yy, xx = np.mgrid[0:Ho, 0:Wo].astype(np.float64)
        yy -= (Ho - 1) / 2.0
        xx -= (Wo - 1) / 2.0
        sy = (c * yy - sn * xx) / p.scale + (H - 1) / 2.0
        sx = (sn * yy + c * xx) / p.scale + (W - 1) / 2.0
        image = np.stack([map_coordinates(ch, [sy, sx], order=1, mode="nearest") for ch in image])
        iy, ix = np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64)
        inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        label = np.where(inside, label[np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1)], ignore_index).astype(np.uint8)
    # pad short sides with background, then crop
    ph, pw = max(0, crop - Ho), max(0, crop - Wo)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=BACKGROUND)
    Hc, Wc = label.shape
    if p.offset is not None:
        oy, ox = p.offset
    elif rng is not None:
        oy, ox = int(rng.integers(0, Hc - crop + 1)), int(rng.integers(0, Wc - crop + 1))
    else:
        oy, ox = (Hc - crop) // 2, (Wc - crop) // 2
    image = np.clip(image[:, oy:oy + crop, ox:ox + crop], 0.0, 1.0)
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(label[oy:oy + crop, ox:ox + crop]), s.id)


def augment(s: Sample, seed, crop: Optional[int] = None, ignore_index: int = IGNORE) -> Sample:
    """Random flip, scale in [0.5, 2], rotation in [-10, 10] degrees and crop."""
    rng = np.random.default_rng(seed)
    crop = crop or s.label.shape[0]
    return apply_augment(s, sample_augment_params(rng), crop, rng, ignore_index)


# ---------------------------------------------------------------------------
# netpbm I/O and on-disk layout
# ---------------------------------------------------------------------------

def _read_tokens(buf: bytes, count: int) -> Tuple[list, int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1  # one whitespace byte ends the header


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> binary P6."""
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    H, W = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (W, H))
        fh.write(arr.tobytes())


def write_pgm(path, label: np.ndarray) -> None:
    arr = np.asarray(label, dtype=np.uint8)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(arr.tobytes())


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _read_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit netpbm is supported")
    if magic == b"P6":
        n = w * h * 3
        data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start)
        return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
    if magic == b"P5":
        data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start)
        return data.reshape(h, w).copy()
    raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")


def read_ppm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a P6 colour image")
    return arr.astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a P5 greyscale image")
    return arr


def sample_name(i: int) -> str:
    return f"{i:06d}"


def write_dataset(root, samples: Sequence[Sample], labeled: Iterable[int], spec: SceneSpec) -> None:
    """images/<id>.ppm, labels/<id>.pgm, manifest.txt and spec.txt under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lab = set(labeled)
    lines = []
    for s in samples:
        name = sample_name(s.id)
        write_ppm(root / "images" / f"{name}.ppm", s.image)
        write_pgm(root / "labels" / f"{name}.pgm", s.label)
        lines.append(f"{name} {'labeled' if s.id in lab else 'unlabeled'}\n")
    (root / "manifest.txt").write_text("".join(lines))
    (root / "spec.txt").write_text(spec.to_text())


@dataclass
class DiskDataset:
    spec: SceneSpec
    labeled: List[Sample]
    unlabeled: List[Sample]


def load_dataset(root) -> DiskDataset:
    root = Path(root)
    for req in ("manifest.txt", "spec.txt", "images", "labels"):
        if not (root / req).exists():
            raise FileNotFoundError(f"dataset {root} is missing {req}")
    spec = SceneSpec.from_text((root / "spec.txt").read_text())
    labeled, unlabeled = [], []
    for lineno, line in enumerate((root / "manifest.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("labeled", "unlabeled"):
            raise ValueError(f"manifest line {lineno} malformed: {line!r}")
        name, kind = parts
        img = read_ppm(root / "images" / f"{name}.ppm")
        lbl = read_pgm(root / "labels" / f"{name}.pgm")
        (labeled if kind == "labeled" else unlabeled).append(Sample(img, lbl, int(name)))
    return DiskDataset(spec, labeled, unlabeled)


def dir_is_nonempty(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))


def with_size(spec: SceneSpec, size: int) -> SceneSpec:
    return replace(spec, size=size)
