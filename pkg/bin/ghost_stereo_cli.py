#!/usr/bin/env python3
"""Command-line entry point: train, eval, infer and analyze."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import torch

from ghost_stereo_blocks import count_macs, count_params, profile_module
from ghost_stereo_data import (
    DATASET_FORMATS,
    KittiDataset,
    SceneFlowDataset,
    SyntheticStereoDataset,
    channel_statistics,
    evaluate,
    read_image,
    save_prediction,
)
from ghost_stereo_model import build_model
from ghost_stereo_runlog import TRAIN_LOG_NAME, RunManifest, append_log, write_json
from ghost_stereo_train import (
    evaluate_model,
    init_from_checkpoint,
    load_checkpoint,
    new_train_state,
    predict,
    train_loop,
)
from ghost_stereo_types import (
    PRESETS,
    ConfigError,
    GhostStereoError,
    ModelConfig,
    TrainConfig,
    TrainingAborted,
    load_run_config,
    override,
)

DATA_ROOT_ENV = "GHOSTSTEREO_DATA_ROOT"
DEFAULT_OUT = Path("runs") / "latest"
VAL_SEED_OFFSET = 1000


def build_help_text(prog: str) -> str:
    return f"""Usage:
  {prog} train [--preset desk|paper|kitti] [--config FILE] [--synthetic | --data DIR --format FMT] [--out DIR]
  {prog} eval --checkpoint FILE [--synthetic | --data DIR --format FMT] [--out FILE]
  {prog} infer --checkpoint FILE --left PNG --right PNG --out STEM [--color]
  {prog} analyze [--preset desk|paper|kitti] [--config FILE] [--height H --width W] [--json]

Commands:
  train     Train a model; writes manifest.json, train.log, metrics.jsonl and checkpoint.pt into --out.
  eval      Evaluate a checkpoint: EPE, D1 (all/bg/fg) and bad-1/2/3 percentages.
  infer     Predict disparity for one stereo pair; writes STEM.pfm, STEM.png (x256) and optionally STEM_color.png.
  analyze   Parameter and MAC counts per module for the model and its vanilla-3D-conv twin.

Model flags (train, analyze):
  --no-cve --no-cva --max-disp N --groups G --topk K --seed S

Train flags:
  --steps N --epochs N --rounds N --batch-size N --lr LR --deterministic --quiet
  --resume CKPT | --init-from CKPT   continue a run, or start fresh from its weights only
  --val-synthetic | --val-data DIR   held-out data scored every epoch (val_epe)
  --no-dataset-stats                 keep the configured image mean/std

Dataset formats:
  {', '.join(DATASET_FORMATS)}. --data defaults to ${DATA_ROOT_ENV}.

Examples:
  {prog} train --synthetic --steps 500 --preset desk --out runs/desk
  {prog} eval --checkpoint runs/desk/checkpoint.pt --synthetic
  {prog} train --preset kitti --data kitti2015 --format kitti --init-from runs/sceneflow/checkpoint.pt
  {prog} analyze --preset desk --no-cva
"""


def print_help(file=None) -> None:
    if file is None:
        file = sys.stdout
    prog = os.path.basename(sys.argv[0]) or "ghost-stereo"
    print(build_help_text(prog), file=file)


# ---------------------------------------------------------------------------
# Shared argument handling
# ---------------------------------------------------------------------------


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=PRESETS, default="desk")
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--no-cve", action="store_true")
    parser.add_argument("--no-cva", action="store_true")
    parser.add_argument("--max-disp", type=int, default=None)
    parser.add_argument("--groups", type=int, default=None)
    parser.add_argument("--topk", type=int, default=None)


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--synthetic", action="store_true", help="use the random-dot generator")
    parser.add_argument("--data", action="append", type=Path, default=None,
                        help="dataset root (repeatable for KITTI 2012 + 2015)")
    parser.add_argument("--format", choices=DATASET_FORMATS, default=None)
    parser.add_argument("--split", default=None, help="SceneFlow split (TRAIN or TEST)")


def resolve_configs(args: argparse.Namespace) -> tuple[ModelConfig, TrainConfig]:
    """Preset, then --config file, then CLI flags."""
    model, train = load_run_config(args.config, args.preset)
    model_changes: dict[str, Any] = dict(
        seed=args.seed,
        max_disparity=args.max_disp,
        num_groups=args.groups,
        topk=args.topk,
        use_cve=False if args.no_cve else None,
        use_cva=False if args.no_cva else None,
    )
    if args.groups is not None and "aggregation_channels" not in _config_model_keys(args.config):
        g = args.groups
        model_changes["aggregation_channels"] = (g, 2 * g, 4 * g, 6 * g)
    model = override(model, **model_changes)
    train = override(
        train,
        rounds=getattr(args, "rounds", None),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        lr=getattr(args, "lr", None),
    )
    if getattr(args, "deterministic", False):
        train = replace(train, num_workers=0)
    return model, train


def _config_model_keys(path: Optional[Path]) -> set[str]:
    if path is None:
        return set()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return set()
    return set(raw.get("model", {})) if isinstance(raw, dict) else set()


def build_dataset(args: argparse.Namespace, model: ModelConfig, train: TrainConfig, *, training: bool):
    crop = train.crop if training else None
    if args.synthetic or args.format == "synthetic":
        size = train.synthetic_size
        return SyntheticStereoDataset(model, train.synthetic_pairs, size, crop=crop, seed=model.seed)
    roots = args.data
    if not roots:
        env = os.environ.get(DATA_ROOT_ENV, "")
        roots = [Path(env)] if env else []
    if not roots:
        raise ConfigError(f"no dataset: pass --synthetic, --data DIR or set {DATA_ROOT_ENV}")
    if args.format is None:
        raise ConfigError("--format is required with --data")
    for root in roots:
        if not root.is_dir():
            raise ConfigError(f"dataset root not found: {root}")
    if args.format == "sceneflow":
        split = args.split or ("TRAIN" if training else "TEST")
        return SceneFlowDataset(model, roots[0], split, crop=crop, seed=model.seed)
    return KittiDataset(model, roots, crop=crop, seed=model.seed)


def _apply_determinism(args: argparse.Namespace, seed: int) -> None:
    torch.manual_seed(seed)
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _table_plain(title: str, headers: tuple[str, ...], rows: list[tuple[str, ...]]) -> None:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    print(title)
    print("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    print("  ".join("-" * w for w in widths))
    for row in rows:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))


def print_table(title: str, headers: tuple[str, ...], rows: list[tuple[str, ...]]) -> None:
    try:
        from rich.console import Console
        from rich.table import Table
    except ModuleNotFoundError:
        _table_plain(title, headers, rows)
        return
    table = Table(title=title)
    for i, header in enumerate(headers):
        table.add_column(header, justify="left" if i == 0 else "right", no_wrap=True)
    for row in rows:
        table.add_row(*row)
    Console().print(table)


def _fmt_metric(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def print_report(report) -> None:
    rows = [
        ("epe", _fmt_metric(report.epe)),
        ("d1_all", _fmt_metric(report.d1_all)),
        ("d1_bg", _fmt_metric(report.d1_bg)),
        ("d1_fg", _fmt_metric(report.d1_fg)),
        ("bad_1", _fmt_metric(report.bad_1)),
        ("bad_2", _fmt_metric(report.bad_2)),
        ("bad_3", _fmt_metric(report.bad_3)),
        ("valid_pixels", str(report.num_valid_pixels)),
    ]
    print_table("Metrics", ("METRIC", "VALUE"), rows)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def build_val_dataset(args: argparse.Namespace, model: ModelConfig, train: TrainConfig):
    """Held-out data scored after every epoch, or None."""
    if args.val_synthetic:
        size = train.synthetic_size
        return SyntheticStereoDataset(model, train.synthetic_pairs, size, seed=model.seed + VAL_SEED_OFFSET)
    if not args.val_data:
        return None
    fmt = args.format
    if fmt in (None, "synthetic"):
        raise ConfigError("--val-data needs --format sceneflow or kitti")
    for root in args.val_data:
        if not root.is_dir():
            raise ConfigError(f"validation root not found: {root}")
    if fmt == "sceneflow":
        return SceneFlowDataset(model, args.val_data[0], args.val_split or "TEST", seed=model.seed)
    return KittiDataset(model, args.val_data, seed=model.seed)


def cmd_train(argv: list[str]) -> None:
    parser = argparse.ArgumentParser(prog="ghost-stereo train")
    _add_model_flags(parser)
    _add_data_flags(parser)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    parser.add_argument("--steps", type=int, default=None, help="stop after this many optimizer steps")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--rounds", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    start = parser.add_mutually_exclusive_group()
    start.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")
    start.add_argument("--init-from", type=Path, default=None,
                       help="load weights only; epoch, step and optimizer start fresh")
    parser.add_argument("--no-dataset-stats", action="store_true",
                        help="keep the configured normalization instead of the training set's statistics")
    val = parser.add_mutually_exclusive_group()
    val.add_argument("--val-data", action="append", type=Path, default=None,
                     help="held-out dataset root in --format (repeatable)")
    val.add_argument("--val-synthetic", action="store_true", help="validate on held-out random-dot pairs")
    parser.add_argument("--val-split", default=None, help="SceneFlow validation split (default TEST)")
    parser.add_argument("--deterministic", action="store_true")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    model_cfg, train_cfg = resolve_configs(args)
    if args.steps is not None and args.steps <= 0:
        print("error: --steps must be positive", file=sys.stderr)
        sys.exit(2)
    _apply_determinism(args, model_cfg.seed)
    dataset = build_dataset(args, model_cfg, train_cfg, training=True)

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / TRAIN_LOG_NAME
    if args.resume is not None:
        state, _ = load_checkpoint(args.resume, train_cfg)
        model_cfg = state.model.config
        append_log(log_path, f"resume: {args.resume} at epoch {state.epoch} step {state.step}")
    elif args.init_from is not None:
        # the loaded weights fix the architecture and the normalization
        state = init_from_checkpoint(args.init_from, train_cfg, seed=args.seed)
        model_cfg = state.model.config
        append_log(log_path, f"init: weights from {args.init_from}")
    else:
        if not args.no_dataset_stats:
            mean, std = channel_statistics(dataset)
            model_cfg = replace(model_cfg, image_mean=mean, image_std=std)
            append_log(log_path, "normalize: mean " + _fmt_triple(mean) + " std " + _fmt_triple(std))
        state = new_train_state(model_cfg, train_cfg)
    dataset.config = model_cfg
    val_dataset = build_val_dataset(args, model_cfg, train_cfg)

    manifest = RunManifest(
        command="train " + " ".join(argv),
        config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
    )
    manifest.write(out)
    append_log(
        log_path,
        f"start: {len(dataset)} samples"
        + (f", {len(val_dataset)} validation" if val_dataset is not None else "")
        + f", config {manifest.config_hash[:12]}",
    )

    echo = None if args.quiet else print
    try:
        state = train_loop(state, dataset, train_cfg, out, val_dataset=val_dataset, max_steps=args.steps, echo=echo)
    except TrainingAborted as exc:
        manifest.finish({"aborted": str(exc), "epoch": exc.epoch, "batch_id": exc.batch_id})
        manifest.write(out)
        raise

    report = evaluate_model(state.model, dataset)
    final = {"train_epe": report.epe, "bad_3": report.bad_3, "epoch": state.epoch, "step": state.step}
    line = f"final: train_epe {report.epe:.4f} bad_3 {report.bad_3:.2f}% steps {state.step}"
    if val_dataset is not None:
        val_report = evaluate_model(state.model, val_dataset)
        final["val_epe"] = val_report.epe
        line += f" val_epe {val_report.epe:.4f}"
    manifest.finish(final)
    manifest.write(out)
    append_log(log_path, line)
    print(line)


def _fmt_triple(values) -> str:
    return "(" + ", ".join(f"{v:.4f}" for v in values) + ")"


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(argv: list[str]) -> None:
    parser = argparse.ArgumentParser(prog="ghost-stereo eval")
    parser.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(parser)
    parser.add_argument("--out", type=Path, default=None, help="JSON report path")
    parser.add_argument("--loopback", action="store_true",
                        help="score the ground truth against itself (pipeline check)")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    state, train_cfg = load_checkpoint(args.checkpoint)
    model_cfg = state.model.config
    if args.seed is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
    torch.manual_seed(model_cfg.seed)
    dataset = build_dataset(args, model_cfg, train_cfg, training=False)
    if args.loopback:
        report = _loopback_report(dataset)
    else:
        report = evaluate_model(state.model, dataset)
    print_report(report)
    if args.out is not None:
        write_json(args.out, report.to_dict())
        print(f"report: {args.out}")


def _loopback_report(dataset):
    gts, masks, objs = [], [], []
    for i in range(len(dataset)):
        sample = dataset[i]
        gts.append(sample.gt_disparity.reshape(-1))
        masks.append(sample.valid_mask.reshape(-1))
        objs.append(None if sample.obj_mask is None else sample.obj_mask.reshape(-1))
    gt = torch.cat(gts)
    obj = torch.cat(objs) if all(o is not None for o in objs) else None
    return evaluate(gt.clone(), gt, torch.cat(masks), obj)


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(argv: list[str]) -> None:
    parser = argparse.ArgumentParser(prog="ghost-stereo infer")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--left", type=Path, required=True)
    parser.add_argument("--right", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True, help="output path stem")
    parser.add_argument("--color", action="store_true", help="also write a color-mapped PNG")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    for path in (args.left, args.right):
        if not path.is_file():
            raise ConfigError(f"image not found: {path}")
    state, _ = load_checkpoint(args.checkpoint)
    torch.manual_seed(state.model.config.seed if args.seed is None else args.seed)
    left, right = read_image(args.left), read_image(args.right)
    if left.shape != right.shape:
        raise ConfigError(f"left {tuple(left.shape)} and right {tuple(right.shape)} images differ in size")
    disparity = predict(state.model, left.unsqueeze(0), right.unsqueeze(0))[0].cpu().numpy()
    max_disp = float(state.model.config.max_disparity) if args.color else None
    for path in save_prediction(args.out, disparity, max_disparity=max_disp):
        print(f"wrote: {path}")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def analyze_model(model_cfg: ModelConfig, height: int, width: int) -> dict[str, Any]:
    """Per-module params/MACs for ``model_cfg`` and its vanilla-3D-conv twin."""
    twin_cfg = replace(model_cfg, use_cva=False)
    result: dict[str, Any] = {"input": [1, 3, height, width]}
    for label, cfg in (("model", model_cfg), ("vanilla", twin_cfg)):
        model = build_model(cfg)
        image = torch.zeros(1, 3, height, width)
        groups = profile_module(model, image, image, depth=1)
        modules = {name: {"params": p.params, "macs": p.macs} for name, p in sorted(groups.items())}
        enc = model.cva.encoder_spec()
        vol_shape = (1, cfg.num_groups, cfg.disparity_levels, height // 4, width // 4)
        result[label] = {
            "config": {"use_cve": cfg.use_cve, "use_cva": cfg.use_cva},
            "modules": modules,
            "total": {
                "params": sum(m["params"] for m in modules.values()),
                "macs": sum(m["macs"] for m in modules.values()),
            },
            "cva_encoder": {"params": count_params(enc), "macs": count_macs(enc, vol_shape)},
        }
    result["compression"] = {
        "total_params": _ratio(result["vanilla"]["total"]["params"], result["model"]["total"]["params"]),
        "total_macs": _ratio(result["vanilla"]["total"]["macs"], result["model"]["total"]["macs"]),
        "cva_encoder_params": _ratio(result["vanilla"]["cva_encoder"]["params"],
                                     result["model"]["cva_encoder"]["params"]),
        "cva_encoder_macs": _ratio(result["vanilla"]["cva_encoder"]["macs"],
                                   result["model"]["cva_encoder"]["macs"]),
    }
    return result


def _ratio(num: int, den: int) -> Optional[float]:
    return round(num / den, 4) if den else None


def cmd_analyze(argv: list[str]) -> None:
    parser = argparse.ArgumentParser(prog="ghost-stereo analyze")
    _add_model_flags(parser)
    parser.add_argument("--height", type=int, default=None)
    parser.add_argument("--width", type=int, default=None)
    parser.add_argument("--json", action="store_true", help="print JSON instead of tables")
    args = parser.parse_args(argv)

    model_cfg, train_cfg = resolve_configs(args)
    default_h, default_w = train_cfg.crop if train_cfg.crop else train_cfg.synthetic_size
    height = args.height or default_h
    width = args.width or default_w
    if height % 32 or width % 32:
        print(f"error: --height/--width must be multiples of 32, got {height}x{width}", file=sys.stderr)
        sys.exit(2)
    result = analyze_model(model_cfg, height, width)
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
        return
    for label in ("model", "vanilla"):
        section = result[label]
        rows = [(name, f"{m['params']:,}", f"{m['macs']:,}") for name, m in section["modules"].items()]
        rows.append(("total", f"{section['total']['params']:,}", f"{section['total']['macs']:,}"))
        rows.append(("cva encoder", f"{section['cva_encoder']['params']:,}", f"{section['cva_encoder']['macs']:,}"))
        flags = section["config"]
        title = f"{label} (cve={'on' if flags['use_cve'] else 'off'}, cva={'ghost' if flags['use_cva'] else 'vanilla'}) @ {height}x{width}"
        print_table(title, ("MODULE", "PARAMS", "MACS"), rows)
    rows = [(name, "-" if v is None else f"{v:.2f}x") for name, v in result["compression"].items()]
    print_table("Compression (vanilla / model)", ("QUANTITY", "RATIO"), rows)


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------


def main() -> None:
    if len(sys.argv) < 2:
        print_help(file=sys.stderr)
        sys.exit(2)
    subcmd = sys.argv[1]
    rest = sys.argv[2:]

    if subcmd in ("-h", "--help", "help"):
        print_help()
        raise SystemExit(0)

    commands = {
        "train": cmd_train,
        "eval": cmd_eval,
        "infer": cmd_infer,
        "analyze": cmd_analyze,
    }

    if subcmd not in commands:
        print_help(file=sys.stderr)
        sys.exit(2)
    try:
        commands[subcmd](rest)
    except GhostStereoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
