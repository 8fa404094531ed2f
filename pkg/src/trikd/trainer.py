"""Optimisation loop: SGD with momentum and weight decay under a poly schedule,
mixed labeled/unlabeled batches, hybrid-only mIoU evaluation, binary
checkpoints and a CSV metrics log."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import losses
from .autodiff import Tensor, no_grad, ops
from .config import ConfigError, TrainConfig
from .data import (
    EVAL_ID_OFFSET,
    DiskDataset,
    Sample,
    SceneSpec,
    augment,
    generate_dataset,
    generate_sample,
    split,
)
from .losses import VIEWS, LossReport, LossWeights
from .model import TriKD
from .nn import Module, Parameter

MAGIC = b"TRIKD"
VERSION = 1
CSV_HEADER = "step,lr,seg,cps,spa,att,total,miou_eval"


class NumericalError(FloatingPointError):
    """A non-finite value appeared in a loss or gradient; the message names the tensor."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser
# ---------------------------------------------------------------------------

def poly_lr(it: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1.0 - it / max_iter) ** power


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
             buffers: Sequence[np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """In place: v <- momentum*v + (g + weight_decay*p); p <- p - lr*v.  A missing grad counts as zero."""
    if not len(params) == len(grads) == len(buffers):
        raise ValueError(f"sgd_step: {len(params)} params, {len(grads)} grads, {len(buffers)} buffers")
    for i, (p, g, v) in enumerate(zip(params, grads, buffers)):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"sgd_step: grad {i} has shape {g.shape}, param {p.shape}")
        if v.shape != p.shape:
            raise ValueError(f"sgd_step: buffer {i} has shape {v.shape}, param {p.shape}")
        v *= momentum
        if g is not None:
            v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: TriKD
    config: TrainConfig
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.model.named_parameters():
            self.velocity.setdefault(name, np.zeros(p.shape))

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        return cls(TriKD.build(config.model_config(), config.seed), config)


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(cfg.lambda_spa, cfg.lambda_att, cfg.lambda_cps)


def _check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")


def forward_losses(model: TriKD, xl: np.ndarray, yl: np.ndarray, xu: Optional[np.ndarray],
                   cfg: TrainConfig):
    """Forward labeled+unlabeled as one batch; returns (total tensor, per-term tensors)."""
    nl = len(xl)
    if nl == 0:
        raise ValueError("train_step: labeled batch is empty")
    semi = cfg.mode == "semi"
    nu = 0 if xu is None else len(xu)
    if semi and nu == 0:
        raise ValueError("train_step: semi mode needs a non-empty unlabeled batch")
    if not semi and nu:
        raise ValueError("train_step: supervised mode takes no unlabeled batch")
    x = np.concatenate([xl, xu]) if nu else np.asarray(xl)
    out = model(Tensor(x))
    seg = {v: losses.seg_ce(out.probs[v][:nl], yl, cfg.ignore_index) for v in VIEWS}
    if semi:
        cps = losses.cps_losses(*(out.probs[v][nl:] for v in VIEWS))
    else:
        cps = {v: Tensor(0.0) for v in VIEWS}
    f1_cnn, att_vit = out.f1_cnn, out.att_vit.matrix
    if cfg.freeze_teachers:
        f1_cnn, att_vit = f1_cnn.detach(), att_vit.detach()
    spa = losses.spatial_loss(f1_cnn, out.f1_proj)
    att = losses.attention_loss(att_vit, out.att_hyb.matrix)
    seg_sum = ops.add(ops.add(seg["cnn"], seg["vit"]), seg["hyb"])
    cps_sum = ops.add(ops.add(cps["cnn"], cps["vit"]), cps["hyb"])
    total = losses.total_loss(seg_sum, spa, att, cps_sum, loss_weights(cfg), cfg.mode)
    return total, {"seg": seg, "cps": cps, "spa": spa, "att": att}


def train_step(state: TrainState, xl: np.ndarray, yl: np.ndarray, xu: Optional[np.ndarray],
               lr: float) -> LossReport:
    """One forward, one backward, one SGD update per parameter group."""
    cfg, model = state.config, state.model
    model.train()
    model.zero_grad()
    total, terms = forward_losses(model, xl, yl, xu, cfg)
    report = LossReport(
        seg={v: terms["seg"][v].item() for v in VIEWS},
        cps={v: terms["cps"][v].item() for v in VIEWS},
        spa=terms["spa"].item(),
        att=terms["att"].item(),
        total=total.item(),
    )
    for name in ("total", "spa", "att"):
        _check_finite(f"loss.{name}", getattr(report, name))
    for v in VIEWS:
        _check_finite(f"loss.seg.{v}", report.seg[v])
        _check_finite(f"loss.cps.{v}", report.cps[v])
    total.backward()
    for gname, mods in model.groups().items():
        names, ps, gs, vs = [], [], [], []
        for mod in mods:
            prefix = _prefix_of(model, mod)
            for name, p in mod.named_parameters(prefix):
                if p.grad is not None:
                    _check_finite(f"grad[{name}]", p.grad)
                names.append(name)
                ps.append(p.value)
                gs.append(p.grad)
                vs.append(state.velocity[name])
        sgd_step(ps, gs, vs, lr, cfg.momentum, cfg.weight_decay)
    model.zero_grad()
    for name, p in model.named_parameters():
        _check_finite(f"param[{name}]", p.value)
    state.step += 1
    return report


def _prefix_of(model: Module, child: Module) -> str:
    for key, val in model._children():
        if val is child:
            return key + "."
    raise KeyError("module is not a direct child")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    iou: np.ndarray  # per class; nan where the union is empty
    miou: float
    confusion: np.ndarray  # rows: ground truth, cols: prediction
    pixels: int

    def summary(self) -> str:
        parts = " ".join(f"c{c}={v:.4f}" if np.isfinite(v) else f"c{c}=n/a" for c, v in enumerate(self.iou))
        return f"mIoU={self.miou:.4f} pixels={self.pixels} {parts}"


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: Optional[int] = 255) -> np.ndarray:
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction and label sizes differ ({pred.size} vs {gt.size})")
    keep = np.ones(gt.shape, bool) if ignore_index is None else gt != ignore_index
    pred, gt = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if gt.size and (gt.max() >= num_classes or pred.max() >= num_classes or min(gt.min(), pred.min()) < 0):
        raise ValueError("class index outside [0, num_classes)")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    iou = np.full(len(cm), np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    miou = float(np.mean(iou[present])) if present.any() else float("nan")
    return EvalReport(iou, miou, cm, int(cm.sum()))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: Optional[int] = 255) -> float:
    return report_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index)).miou


def evaluate(model: TriKD, samples: Sequence[Sample], ignore_index: int = 255, batch: int = 16) -> EvalReport:
    """mIoU of the hybrid path over ``samples``; the other encoders are never touched."""
    if not len(samples):
        raise ValueError("evaluate: eval set is empty")
    C = model.cfg.num_classes
    cm = np.zeros((C, C), dtype=np.int64)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x = np.stack([s.image for s in chunk])
        pred = model.predict(x)
        cm += confusion_matrix(pred, np.stack([s.label for s in chunk]), C, ignore_index)
    return report_from_confusion(cm)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_text: str
    tensors: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray]
    step: int


def _write_records(buf: io.BytesIO, items) -> None:
    items = list(items)
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def records(self, what: str) -> Dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32(f"{what} count")):
            name = self.take(self.u32(f"{what} name length"), f"{what} name").decode("utf-8")
            rank = self.u32(f"{name} rank")
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank, f"{name} extents"))
            n = int(np.prod(shape))
            out[name] = np.frombuffer(self.take(8 * n, f"{name} values"), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + bytes([VERSION]))
    cfg = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_records(buf, ckpt.tensors.items())
    _write_records(buf, ckpt.momentum.items())
    buf.write(struct.pack("<Q", ckpt.step))
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    cfg = r.take(r.u32("config length"), "config").decode("utf-8")
    tensors = r.records("tensor")
    mom = r.records("momentum")
    step = struct.unpack("<Q", r.take(8, "step counter"))[0]
    if r.pos != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    return Checkpoint(cfg, tensors, mom, int(step))


def state_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {name: arr.copy() for name, _, arr in state.model.named_state()}
    return Checkpoint(state.config.to_text(), tensors, {k: v.copy() for k, v in state.velocity.items()}, state.step)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state_checkpoint(state)))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def check_compatible(ckpt: Checkpoint, model: Module) -> None:
    """Every named tensor must exist in ``model`` with the same shape (works on shape-only builds)."""
    expected = {name: tuple(shape) for name, shape, _ in model.named_state()}
    for name, shape in expected.items():
        if name in ckpt.tensors and ckpt.tensors[name].shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {ckpt.tensors[name].shape}, model {shape}")
    missing = sorted(set(expected) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match the model (missing {missing[:3]}, unexpected {extra[:3]})")


def restore(ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> TrainState:
    from .config import build_config, parse_pairs

    cfg = config or build_config(parse_pairs(ckpt.config_text))
    model = TriKD(cfg.model_config(), np.random.default_rng(0))
    check_compatible(ckpt, model)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, arr in ckpt.tensors.items():
        if name in params:
            params[name].value[...] = arr
        else:
            buffers[name][...] = arr
    vel = {}
    for name, p in params.items():
        if name not in ckpt.momentum or ckpt.momentum[name].shape != p.shape:
            raise CheckpointError(f"momentum buffer for {name} missing or mis-shaped")
        vel[name] = ckpt.momentum[name].copy()
    return TrainState(model, cfg, vel, ckpt.step)


# ---------------------------------------------------------------------------
# data plumbing and the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    labeled: List[Sample]
    unlabeled: List[Sample]
    eval: List[Sample]


def synthetic_data(cfg: TrainConfig, spec: Optional[SceneSpec] = None) -> TrainData:
    """Fixed generator seed for the pool; the label split follows ``cfg.seed``."""
    spec = spec or SceneSpec(size=cfg.model_config().image_size, num_classes=cfg.num_classes)
    pool = generate_dataset(spec, cfg.dataset_size)
    lab, unl = split(cfg.dataset_size, cfg.label_ratio, cfg.seed)
    return TrainData([pool[i] for i in lab], [pool[i] for i in unl], eval_set(spec, cfg.eval_size))


def eval_set(spec: SceneSpec, count: int) -> List[Sample]:
    return generate_dataset(spec, count, offset=EVAL_ID_OFFSET)


def disk_data(ds: DiskDataset, cfg: TrainConfig) -> TrainData:
    return TrainData(ds.labeled, ds.unlabeled, eval_set(ds.spec, cfg.eval_size))


def batch_sizes(cfg: TrainConfig) -> tuple:
    """(labeled, unlabeled) per step; supervised keeps the labeled share so step counts match."""
    bl = max(1, cfg.batch_size // 2)
    bu = cfg.batch_size - bl if cfg.mode == "semi" else 0
    if cfg.mode == "semi" and bu == 0:
        raise ConfigError("semi mode needs batch_size >= 2")
    return bl, bu


def schedule_length(cfg: TrainConfig, n_labeled: int) -> tuple:
    """(steps per epoch, total steps) with an epoch being one pass over the labeled set."""
    bl, _ = batch_sizes(cfg)
    per_epoch = math.ceil(n_labeled / bl)
    return per_epoch, per_epoch * cfg.epochs


def _prepare(s: Sample, cfg: TrainConfig, step: int, slot: int, stream: int) -> Sample:
    if not cfg.augment:
        return s
    return augment(s, [cfg.seed, step, stream, slot], s.label.shape[0], cfg.ignore_index)


def make_batch(data: TrainData, cfg: TrainConfig, step: int):
    """Labeled/unlabeled arrays for ``step``, derived from (seed, step) alone so resumes replay exactly."""
    bl, bu = batch_sizes(cfg)
    nl, nu = len(data.labeled), len(data.unlabeled)
    per_epoch = math.ceil(nl / bl)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([cfg.seed, epoch, 1]).permutation(nl)
    idx = perm[(k * bl + np.arange(bl)) % nl]
    lab = [_prepare(data.labeled[i], cfg, step, j, 0) for j, i in enumerate(idx)]
    xl = np.stack([s.image for s in lab])
    yl = np.stack([s.label for s in lab]).astype(np.int64)
    xu = None
    if bu:
        if nu == 0:
            raise ConfigError("semi mode needs unlabeled samples (label_ratio < 1)")
        rng = np.random.default_rng([cfg.seed, step, 2])
        uidx = rng.choice(nu, bu, replace=nu < bu)
        xu = np.stack([_prepare(data.unlabeled[i], cfg, step, j, 1).image for j, i in enumerate(uidx)])
    return xl, yl, xu


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def csv_row(step: int, lr: float, rep: LossReport, miou_eval: Optional[float]) -> str:
    r = rep.row()
    return ",".join([str(step), _fmt(lr), _fmt(r["seg"]), _fmt(r["cps"]), _fmt(r["spa"]),
                     _fmt(r["att"]), _fmt(r["total"]), _fmt(miou_eval)]) + "\n"


@dataclass
class TrainResult:
    state: TrainState
    eval: Optional[EvalReport]
    history: List[LossReport]


def train(cfg: TrainConfig, data: Optional[TrainData] = None, out_dir=None,
          state: Optional[TrainState] = None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run (or resume, when ``state`` is given) the schedule.

    With ``out_dir`` the loop appends to ``metrics.csv`` and writes
    ``checkpoint.bin`` every ``checkpoint_every`` steps and at the end.
    """
    cfg.validate()
    data = data or synthetic_data(cfg)
    if not data.labeled:
        raise ConfigError("no labeled samples to train on")
    state = state or TrainState.create(cfg)
    per_epoch, total_steps = schedule_length(cfg, len(data.labeled))
    stop = total_steps if not cfg.max_steps else min(total_steps, cfg.max_steps)
    csv = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.csv"
        fresh = state.step == 0 or not path.exists()
        csv = open(path, "w" if fresh else "a", encoding="utf-8", newline="")
        if fresh:
            csv.write(CSV_HEADER + "\n")
    history, report = [], None
    try:
        while state.step < stop:
            step = state.step
            lr = poly_lr(step, total_steps, cfg.lr, cfg.power)
            xl, yl, xu = make_batch(data, cfg, step)
            rep = train_step(state, xl, yl, xu, lr)
            history.append(rep)
            done = state.step
            m = None
            at_epoch_end = done % per_epoch == 0
            if done == stop or (cfg.eval_every and at_epoch_end and (done // per_epoch) % cfg.eval_every == 0):
                report = evaluate(state.model, data.eval, cfg.ignore_index)
                m = report.miou
            if csv is not None:
                csv.write(csv_row(done, lr, rep, m))
                csv.flush()
                if (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or done == stop:
                    save_checkpoint(state, out_dir / "checkpoint.bin")
            if log is not None and (done % per_epoch == 0 or m is not None):
                log(f"step {done}/{total_steps} lr={lr:.5f} total={rep.total:.4f}" + (f" miou={m:.4f}" if m is not None else ""))
    finally:
        if csv is not None:
            csv.close()
    if report is None and data.eval:
        report = evaluate(state.model, data.eval, cfg.ignore_index)
    return TrainResult(state, report, history)
