"""Command line shell: gen-data, pretrain, finetune, eval, probe, masks, dump-spec.

Configuration files are flat UTF-8 ``key = value`` lines (blank lines and
``#`` comments allowed); unknown keys are errors. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .data import (
    MelCache,
    SyntheticSpec,
    gen_synthetic,
    list_wavs,
    load_labeled,
    split_eval,
    waveform_from_file,
)
from .errors import AjepaError, ConfigError, UsageError
from .finetune import (
    FinetuneConfig,
    RMConfig,
    evaluate,
    finetune_loop,
    linear_probe,
    load_classifier_checkpoint,
    load_encoder_checkpoint,
    save_classifier_checkpoint,
    _grids_tensor,
    _labels_tensor,
)
from .maskgen import CurriculumSchedule, MaskPlan, SamplerConfig, build_mask_plan
from .model import Encoder, ModelConfig, init_parameters, position_tables
from .pretrain import OptimizerConfig, PretrainSetup, load_train_state, pretrain_loop
from .records import MetricsRecord
from .spectro import FrontendConfig, log_mel
from .streams import stream


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

# key -> (group, field or None for derived, parser)
_CONFIG_KEYS = {
    "n_mels": ("frontend", "n_mels", int),
    "win_ms": ("frontend", "win_ms", float),
    "hop_ms": ("frontend", "hop_ms", float),
    "fft_size": ("frontend", "fft_size", int),
    "target_frames": ("frontend", "target_frames", int),
    "patch_h": ("frontend", None, int),
    "patch_w": ("frontend", None, int),
    "jitter_db": ("frontend", "jitter_db", float),
    "log_floor": ("frontend", "log_floor", float),
    "n_targets_block": ("sampler", "n_targets_block", int),
    "block_scale_min": ("sampler", None, float),
    "block_scale_max": ("sampler", None, float),
    "block_aspect_min": ("sampler", None, float),
    "block_aspect_max": ("sampler", None, float),
    "n_targets_tf": ("sampler", "n_targets_tf", int),
    "tf_scale_min": ("sampler", None, float),
    "tf_scale_max": ("sampler", None, float),
    "context_scale_min": ("sampler", None, float),
    "context_scale_max": ("sampler", None, float),
    "context_aspect": ("sampler", "context_aspect", float),
    "min_ratio": ("sampler", "min_ratio", float),
    "max_tries": ("sampler", "max_tries", int),
    "plan_retries": ("sampler", "plan_retries", int),
    "embed_dim": ("model", "embed_dim", int),
    "enc_depth": ("model", "enc_depth", int),
    "n_heads": ("model", "n_heads", int),
    "pred_depth": ("model", "pred_depth", int),
    "pred_dim": ("model", "pred_dim", int),
    "mlp_ratio": ("model", "mlp_ratio", float),
    "lr": ("optimizer", "lr", float),
    "beta1": ("optimizer", None, float),
    "beta2": ("optimizer", None, float),
    "weight_decay": ("optimizer", "weight_decay", float),
    "warmup_steps": ("optimizer", "warmup_steps", int),
    "total_steps": ("optimizer", "total_steps", int),
    "batch_size": ("optimizer", "batch_size", int),
    "ema_m0": ("optimizer", None, float),
    "ema_m1": ("optimizer", None, float),
    "target_norm": ("optimizer", "target_norm", str),
    "c0": ("schedule", "c0", float),
    "kind": ("schedule", "kind", str),
}

_RANGE_PAIRS = {
    "sampler": [
        ("block_scale_min", "block_scale_max", "block_scale"),
        ("block_aspect_min", "block_aspect_max", "block_aspect"),
        ("tf_scale_min", "tf_scale_max", "tf_scale"),
        ("context_scale_min", "context_scale_max", "context_scale"),
    ],
    "optimizer": [
        ("beta1", "beta2", "betas"),
        ("ema_m0", "ema_m1", "ema_momentum"),
    ],
}


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` pairs; comments and blank lines are skipped."""
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key in overrides:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        overrides[key] = value
    return overrides


def build_setup(overrides: dict[str, str]) -> PretrainSetup:
    """Apply flat overrides on top of desk-scale defaults."""
    groups: dict[str, dict] = {
        "frontend": {}, "sampler": {}, "model": {}, "optimizer": {}, "schedule": {},
    }
    raw: dict[str, object] = {}
    for key, value in overrides.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        group, field, parse = _CONFIG_KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        raw[key] = parsed
        if field is not None:
            groups[group][field] = parsed

    defaults = {
        "frontend": FrontendConfig(),
        "sampler": SamplerConfig(),
        "optimizer": OptimizerConfig(),
    }
    for group, pairs in _RANGE_PAIRS.items():
        for lo_key, hi_key, field in pairs:
            if lo_key in raw or hi_key in raw:
                default = getattr(defaults[group], field)
                lo = raw.get(lo_key, default[0])
                hi = raw.get(hi_key, default[1])
                groups[group][field] = (lo, hi)
    if "patch_h" in raw or "patch_w" in raw:
        default = FrontendConfig().patch
        groups["frontend"]["patch"] = (
            raw.get("patch_h", default[0]),
            raw.get("patch_w", default[1]),
        )

    frontend = FrontendConfig(**groups["frontend"])
    model_kwargs = dict(groups["model"])
    model_kwargs["patch_len"] = frontend.patch[0] * frontend.patch[1]
    optimizer = OptimizerConfig(**groups["optimizer"])
    schedule = CurriculumSchedule(total_steps=optimizer.total_steps, **groups["schedule"])
    return PretrainSetup(
        frontend=frontend,
        sampler=SamplerConfig(**groups["sampler"]),
        model=ModelConfig(**model_kwargs),
        optimizer=optimizer,
        schedule=schedule,
    )


def setup_from_args(args) -> PretrainSetup:
    overrides = parse_config_file(args.config) if args.config else {}
    return build_setup(overrides)


# ---------------------------------------------------------------------------
# PGM output
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 with maxval 255."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ConfigError("PGM image must be 2-D")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def plan_raster(plan: MaskPlan, cell: int = 16) -> np.ndarray:
    """Context mid-gray, targets white, removed patches black."""
    rows, cols = plan.context.grid
    img = np.zeros((rows, cols), dtype=np.uint8)
    img.flat[list(plan.context.indices)] = 128
    for t in plan.targets:
        img.flat[list(t.indices)] = 255
    return np.kron(img, np.ones((cell, cell), dtype=np.uint8))


def spectrogram_raster(values: np.ndarray) -> np.ndarray:
    """Min-max scale log energies to 8-bit, time on the vertical axis."""
    lo, hi = values.min(), values.max()
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    return (scale * 255).round().astype(np.uint8)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    noise_db = None if args.noise_db.lower() == "none" else float(args.noise_db)
    spec = SyntheticSpec(
        n_classes=args.classes,
        clips_per_class=args.clips_per_class,
        duration_s=args.duration,
        noise_db=noise_db,
        seed=args.seed,
    )
    paths = gen_synthetic(spec, args.out)
    print(f"wrote {len(paths)} clips across {args.classes} classes under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    setup = setup_from_args(args)
    paths = list_wavs(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = load_train_state(args.resume, setup.model, setup.resolved_schedule())
        print(f"resumed from {args.resume} at step {state.step}")
    state, metrics = pretrain_loop(
        paths,
        setup,
        root_seed=args.seed,
        state=state,
        out_dir=out,
        ckpt_interval=args.ckpt_interval,
        log_every=args.log_every,
    )
    final = metrics.column("loss")[-10:] if len(metrics) else []
    if final:
        print(f"finished at step {state.step}; mean loss of last rows {np.mean(final):.4f}")
    print(f"checkpoint: {out / 'checkpoint_final.ajepa'}")
    return 0


def _load_split(args):
    items, names = load_labeled(args.data)
    train_items, eval_items = split_eval(items, args.eval_fraction)
    return train_items, eval_items, names


def cmd_finetune(args) -> int:
    setup = setup_from_args(args)
    train_items, eval_items, names = _load_split(args)
    encoder = load_encoder_checkpoint(args.init, setup.model)
    ft_cfg = FinetuneConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        freeze_encoder=args.freeze_encoder,
        multi_label=args.multi_label,
    )
    rm = RMConfig(ratio=args.rm_ratio, active=args.rm_ratio > 0)
    encoder, head, metrics = finetune_loop(
        train_items, eval_items, encoder, setup.model, setup.frontend,
        ft_cfg, rm, len(names), args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out / "finetune_metrics.csv")
    save_classifier_checkpoint(out / "classifier.ajepa", encoder, head)
    acc = metrics.column("eval_accuracy")[-1]
    ap = metrics.column("eval_map")[-1]
    print(f"final eval accuracy {acc:.4f}  mAP {ap:.4f}")
    return 0


def cmd_probe(args) -> int:
    setup = setup_from_args(args)
    train_items, eval_items, names = _load_split(args)
    encoder = load_encoder_checkpoint(args.init, setup.model)
    _, acc, ap = linear_probe(
        train_items, eval_items, encoder, setup.model, setup.frontend,
        len(names), args.seed, epochs=args.epochs,
    )
    metrics = MetricsRecord(("row", "accuracy", "map"))
    metrics.append(row=0, accuracy=acc, map=ap)
    print(f"probe accuracy {acc:.4f}  mAP {ap:.4f}")
    if args.compare_random:
        random_encoder = Encoder(setup.model)
        init_parameters(random_encoder, stream(args.seed, "init"))
        _, r_acc, r_ap = linear_probe(
            train_items, eval_items, random_encoder, setup.model, setup.frontend,
            len(names), args.seed, epochs=args.epochs,
        )
        metrics.append(row=1, accuracy=r_acc, map=r_ap)
        print(f"random-encoder probe accuracy {r_acc:.4f}  mAP {r_ap:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out / "probe_metrics.csv")
    return 0


def cmd_eval(args) -> int:
    setup = setup_from_args(args)
    items, names = load_labeled(args.data)
    if not args.full:
        _, items = split_eval(items, args.eval_fraction)
    encoder, head = load_classifier_checkpoint(args.ckpt, setup.model, len(names))
    cache = MelCache(setup.frontend)
    grids = _grids_tensor(items, cache)
    labels = _labels_tensor(items, len(names), multi_label=False)
    pos_enc, _ = position_tables(setup.frontend.grid, setup.model)
    acc, ap = evaluate(grids, labels, encoder, head, pos_enc)
    print(f"eval accuracy {acc:.4f}  mAP {ap:.4f}  ({len(items)} items)")
    return 0


def cmd_masks(args) -> int:
    try:
        rows, cols = (int(x) for x in args.grid.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--grid must look like 8x8, got {args.grid!r}") from exc
    sched = CurriculumSchedule(total_steps=args.total_steps)
    force = None if args.mode == "auto" else (
        "time_frequency" if args.mode == "tf" else "block"
    )
    plan = build_mask_plan(
        (rows, cols), SamplerConfig(), args.step, sched,
        stream(args.seed, "masks", args.step, 0), force_mode=force,
    )
    print(f"mode: {plan.mode}")
    print(f"context ({len(plan.context)} patches): {list(plan.context.indices)}")
    for i, t in enumerate(plan.targets):
        print(f"target {i} ({len(t)} patches): {list(t.indices)}")
    write_pgm(args.out, plan_raster(plan))
    print(f"raster: {args.out}")
    return 0


def cmd_dump_spec(args) -> int:
    setup = setup_from_args(args)
    spec = log_mel(waveform_from_file(args.wav), setup.frontend)
    write_pgm(args.out, spectrogram_raster(spec.values))
    print(f"wrote {spec.values.shape[0]}x{spec.values.shape[1]} spectrogram to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p, config=True):
    p.add_argument("--seed", type=int, default=0, help="root RNG seed")
    if config:
        p.add_argument("--config", default=None, help="key = value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ajepa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic labeled tone dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips-per-class", type=int, default=50)
    p.add_argument("--duration", type=float, default=1.5)
    p.add_argument("--noise-db", default="-30", help="noise level in dBFS, or 'none'")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ckpt-interval", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning with RM")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True, help="pretraining checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--rm-ratio", type=float, default=0.10)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--multi-label", action="store_true")
    p.add_argument("--eval-fraction", type=float, default=0.2)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--compare-random", action="store_true",
                   help="also probe a randomly initialized encoder")
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a fine-tuned classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--full", action="store_true", help="use every item, not the split")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("masks", help="sample and visualize one mask plan")
    p.add_argument("--grid", required=True, help="patch grid as RxC, e.g. 8x8")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--total-steps", type=int, default=100)
    p.add_argument("--mode", choices=("auto", "block", "tf"), default="auto")
    p.add_argument("--out", default="mask_plan.pgm")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("dump-spec", help="dump a log-mel spectrogram as PGM")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_dump_spec)

    return parser


def run(argv=None) -> int:
    """Dispatch one invocation; returns the process exit status."""
    torch.set_num_threads(1)  # bit-exact reruns regardless of host cores
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"ajepa: error: {exc}", file=sys.stderr)
        return 1
    except (AjepaError, OSError) as exc:
        print(f"ajepa: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
