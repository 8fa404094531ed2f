"""Command-line entry point: gen-data, train, eval, infer, gradcheck.

Exit status: 0 success, 1 validation failure, 2 non-finite value during training.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps reductions in a fixed order, so runs are bitwise reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import gradsuite  # noqa: E402
from .config import ConfigError, TrainConfig, build_config, parse_pairs, parse_value, schema  # noqa: E402
from .data import (  # noqa: E402
    SceneSpec,
    class_histogram,
    dir_is_nonempty,
    generate_dataset,
    load_dataset,
    read_ppm,
    split,
    write_dataset,
    write_pgm,
    write_ppm,
)
from .trainer import (  # noqa: E402
    CheckpointError,
    NumericalError,
    disk_data,
    eval_set,
    evaluate,
    load_checkpoint,
    restore,
    synthetic_data,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.uint8)

SWEEP_ALIASES = {"lambda": "lambda_cps", "lambda1": "lambda_spa", "lambda2": "lambda_att"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures (exit 1); 2 is reserved for numerical faults."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def config_help() -> str:
    lines = ["config keys (one 'key = value' per line, '#' starts a comment):"]
    for key, (typ, default, text) in schema().items():
        tname = getattr(typ, "__name__", typ)
        lines.append(f"  {key:<17} {tname:<6} default {default!s:<7} {text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="trikd", description="Tri-view distillation segmentation at desk scale.",
                epilog=config_help(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset", epilog=config_help(), formatter_class=fmt)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=320)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="config file; its label_ratio sets the labeled share")
    g.add_argument("--ratio", help="label ratio override, e.g. 1/16")
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    t = sub.add_parser("train", help="train and write checkpoint.bin, metrics.csv, eval.txt",
                       epilog=config_help(), formatter_class=fmt)
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("semi", "supervised"))
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--sweep", metavar="KEY=V1,V2,...",
                   help="one run per value; lambda, lambda1, lambda2 alias lambda_cps, lambda_spa, lambda_att")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.bin")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="hybrid-path mIoU on held-out synthetic images")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory whose spec.txt defines the held-out generator")
    e.add_argument("--count", type=int, help="held-out images (default: eval_size from the checkpoint)")

    i = sub.add_parser("infer", help="label one P6 image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True, help="P5 label map")
    i.add_argument("--viz", help="optional P6 colour rendering")

    c = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    c.add_argument("--op", default="all", help="op name or 'all'")
    c.add_argument("--seeds", type=int, default=10)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    if a.size % 32:
        raise CliError(f"--size {a.size} must be divisible by 32")
    if a.count < 1:
        raise CliError("--count must be positive")
    if dir_is_nonempty(a.out) and not a.force:
        raise CliError(f"output directory {a.out} is not empty (use --force)")
    ratio = TrainConfig().label_ratio
    if a.config:
        ratio = _load_pairs(a.config).label_ratio
    if a.ratio is not None:
        ratio = parse_value("ratio", a.ratio, float)
    spec = SceneSpec(size=a.size, num_classes=a.classes, seed=a.seed)
    samples = generate_dataset(spec, a.count)
    labeled, _ = split(a.count, ratio, a.seed)
    write_dataset(a.out, samples, labeled, spec)
    hist = class_histogram(samples, a.classes)
    print(f"wrote {a.count} samples ({len(labeled)} labeled) to {a.out}")
    for c, n in enumerate(hist):
        print(f"class {c}: {n} pixels ({n / hist.sum():.4f})")
    return EXIT_OK


def _load_pairs(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    return build_config(parse_pairs(text))


def _train_config(a) -> TrainConfig:
    cfg = _load_pairs(a.config) if a.config else TrainConfig()
    overrides = {}
    for item in a.set:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if a.mode:
        overrides["mode"] = a.mode
    return build_config(overrides, cfg)


def _parse_sweep(text: str):
    if "=" not in text:
        raise CliError(f"--sweep expects KEY=V1,V2,..., got {text!r}")
    key, vals = text.split("=", 1)
    key = SWEEP_ALIASES.get(key.strip(), key.strip())
    sch = schema()
    if key not in sch:
        raise ConfigError(f"unknown config key {key!r}")
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not values:
        raise CliError("--sweep needs at least one value")
    return key, [(v, parse_value(key, v, sch[key][0])) for v in values]


def _run(cfg: TrainConfig, data_dir, out: Path, resume: bool, quiet: bool):
    data = disk_data(load_dataset(data_dir), cfg) if data_dir else synthetic_data(cfg)
    state = None
    if resume:
        ckpt_path = out / "checkpoint.bin"
        if not ckpt_path.exists():
            raise CliError(f"--resume: no checkpoint at {ckpt_path}")
        state = restore(load_checkpoint(ckpt_path), cfg)
        if not quiet:
            print(f"resuming at step {state.step}")
    res = train(cfg, data, out, state, log=None if quiet else print)
    out.joinpath("config.txt").write_text(cfg.to_text())
    if res.eval is not None:
        out.joinpath("eval.txt").write_text(res.eval.summary() + "\n")
        print(f"{out}: {res.eval.summary()}")
    return res


def cmd_train(a) -> int:
    cfg = _train_config(a)
    out = Path(a.out)
    if not a.sweep:
        _run(cfg, a.data, out, a.resume, a.quiet)
        return EXIT_OK
    key, values = _parse_sweep(a.sweep)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["key,value,miou_eval\n"]
    for raw, val in values:
        run_cfg = dataclasses.replace(cfg, **{key: val}).validate()
        res = _run(run_cfg, a.data, out / f"{key}={raw}", a.resume, a.quiet)
        rows.append(f"{key},{raw},{res.eval.miou!r}\n")
        out.joinpath("sweep.csv").write_text("".join(rows))
    return EXIT_OK


def _model_from_checkpoint(path):
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return restore(ckpt)


def cmd_eval(a) -> int:
    state = _model_from_checkpoint(a.checkpoint)
    cfg = state.config
    spec = load_dataset(a.data).spec if a.data else SceneSpec(size=cfg.model_config().image_size,
                                                              num_classes=cfg.num_classes)
    rep = evaluate(state.model, eval_set(spec, a.count or cfg.eval_size), cfg.ignore_index)
    print(rep.summary())
    return EXIT_OK


def colorize(label: np.ndarray) -> np.ndarray:
    """(H, W) classes -> (3, H, W) floats with class 0 black."""
    return PALETTE[np.asarray(label) % len(PALETTE)].transpose(2, 0, 1) / 255.0


def cmd_infer(a) -> int:
    state = _model_from_checkpoint(a.checkpoint)
    try:
        image = read_ppm(a.image)
    except OSError as exc:
        raise CliError(f"cannot read image {a.image}: {exc.strerror}") from None
    size = state.model.cfg.image_size
    if image.shape[1:] != (size, size):
        raise CliError(f"image extents {image.shape[1:]} do not match the model input ({size}, {size})")
    label = state.model.predict(image[None])[0].astype(np.uint8)
    write_pgm(a.out, label)
    if a.viz:
        write_ppm(a.viz, colorize(label))
    return EXIT_OK


def cmd_gradcheck(a, registry=None) -> int:
    registry = gradsuite.REGISTRY if registry is None else registry
    names = sorted(registry) if a.op == "all" else [a.op]
    for n in names:
        if n not in registry:
            raise CliError(f"unknown op {n!r}; registered: {', '.join(sorted(registry))}")
    failed = 0
    for n in names:
        err = gradsuite.run_op(n, range(a.seeds), registry)
        ok = err <= gradsuite.TOL
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {n} max_rel_err={err:.3e}")
    print(f"{len(names) - failed}/{len(names)} ops passed")
    return EXIT_OK if not failed else EXIT_INVALID


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CliError, ConfigError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
