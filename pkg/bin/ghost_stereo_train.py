"""Two-scale smooth-L1 supervision, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from ghost_stereo_data import MetricReport, collate_samples, evaluate, item_seed
from ghost_stereo_model import GhostStereo, StereoPrediction, build_model, crop_to_size, pad_to_multiple
from ghost_stereo_runlog import METRICS_LOG_NAME, TRAIN_LOG_NAME, append_jsonl, append_log
from ghost_stereo_types import (
    CheckpointError,
    ConfigError,
    DisparityMap,
    ModelConfig,
    StereoSample,
    TrainConfig,
    TrainingAborted,
)

BASE_LR = 1e-3
LR_MILESTONES = {"pretrain": (10, 14, 16, 18), "finetune": (300,)}
CHECKPOINT_FORMAT = "ghost-stereo-checkpoint"
CHECKPOINT_VERSION = 1
QUARTER = 4

# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: torch.Tensor
    quarter: torch.Tensor
    full: torch.Tensor
    empty_terms: list[str] = field(default_factory=list)


def _masked_smooth_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> Optional[torch.Tensor]:
    if not mask.any():
        return None
    return F.smooth_l1_loss(pred[mask], target[mask], reduction="mean", beta=1.0)


def stereo_loss(
    pred_quarter: DisparityMap,
    pred_full: DisparityMap,
    gt: torch.Tensor,
    mask: torch.Tensor,
    weights: Sequence[float] = (0.3, 1.0),
) -> LossTerms:
    """``w0 * smoothL1(gt[::4, ::4] - 4 * pred_q) + w1 * smoothL1(gt - pred_f)`` over valid pixels.

    A term whose mask is empty contributes 0 and is listed in ``empty_terms``.
    """
    mask = mask.bool()
    q = pred_quarter.values
    gt_q = gt[..., ::QUARTER, ::QUARTER]
    mask_q = mask[..., ::QUARTER, ::QUARTER]
    if gt_q.shape != q.shape:
        raise ConfigError(f"quarter ground truth {tuple(gt_q.shape)} does not match prediction {tuple(q.shape)}")
    empty: list[str] = []
    zero = (q.sum() + pred_full.values.sum()) * 0.0
    quarter = _masked_smooth_l1(QUARTER * q, gt_q, mask_q)
    if quarter is None:
        quarter = zero
        empty.append("quarter")
    full = _masked_smooth_l1(pred_full.values, gt, mask)
    if full is None:
        full = zero
        empty.append("full")
    total = weights[0] * quarter + weights[1] * full
    return LossTerms(total=total, quarter=quarter, full=full, empty_terms=empty)


def lr_schedule(epoch: int, phase: str, base_lr: float = BASE_LR) -> float:
    """Halve ``base_lr`` at every milestone epoch already reached."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    if phase not in LR_MILESTONES:
        raise ConfigError(f"unknown training phase {phase!r}")
    halvings = sum(1 for m in LR_MILESTONES[phase] if epoch >= m)
    return base_lr * 0.5 ** halvings


# ---------------------------------------------------------------------------
# State and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: GhostStereo
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    best_epe: float = math.inf
    seed: int = 0
    history: list[dict] = field(default_factory=list)


def make_optimizer(model: torch.nn.Module, train_config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=train_config.lr,
        betas=tuple(train_config.betas),
        weight_decay=train_config.weight_decay,
    )


def new_train_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    model = build_model(model_config)
    return TrainState(model=model, optimizer=make_optimizer(model, train_config), seed=model_config.seed)


def save_checkpoint(path: Path, state: TrainState, train_config: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.config.to_json(),
        "train_config": train_config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_epe": state.best_epe,
        "seed": state.seed,
        "rng_state": torch.get_rng_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def _read_checkpoint(path: Path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except Exception as exc:  # torch raises several unpickling error types
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a ghost-stereo checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def _restore_model(payload: dict, path: Path) -> GhostStereo:
    model = GhostStereo(ModelConfig.from_json(payload["model_config"]))
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from exc
    return model


def load_checkpoint(path: Path, train_config: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig]:
    """Rebuild model and optimizer from a checkpoint written by ``save_checkpoint``."""
    payload = _read_checkpoint(path)
    if train_config is None:
        train_config = TrainConfig.from_dict(payload["train_config"])
    model = _restore_model(payload, path)
    optimizer = make_optimizer(model, train_config)
    optimizer.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["rng_state"])
    state = TrainState(
        model=model,
        optimizer=optimizer,
        epoch=int(payload["epoch"]),
        step=int(payload["step"]),
        best_epe=float(payload["best_epe"]),
        seed=int(payload["seed"]),
    )
    return state, train_config


def init_from_checkpoint(path: Path, train_config: TrainConfig, seed: Optional[int] = None) -> TrainState:
    """Weights only: epoch, step, best EPE and optimizer start fresh (pretrain -> finetune)."""
    model = _restore_model(_read_checkpoint(path), path)
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, train_config),
        seed=model.config.seed if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def _loader(dataset, train_config: TrainConfig, seed: int, epoch: int) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(item_seed(seed, epoch, 0))
    return DataLoader(
        dataset,
        batch_size=train_config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=train_config.num_workers,
        collate_fn=collate_samples,
    )


def _epoch_lr(epoch: int, train_config: TrainConfig) -> float:
    local = epoch % train_config.epochs if train_config.restart_schedule else epoch
    return lr_schedule(local, train_config.phase, train_config.lr)


def _batch_epe(pred: DisparityMap, batch: StereoSample) -> Optional[float]:
    mask = batch.valid_mask.bool()
    if not mask.any():
        return None
    return float((pred.values.detach()[mask] - batch.gt_disparity[mask]).abs().mean())


def train_loop(
    state: TrainState,
    dataset,
    train_config: TrainConfig,
    run_dir: Optional[Path] = None,
    *,
    val_dataset=None,
    max_steps: Optional[int] = None,
    echo: Optional[Callable[[str], None]] = None,
) -> TrainState:
    """Train from ``state.epoch`` through ``rounds * epochs`` epochs (or ``max_steps`` updates).

    Per epoch: learning rate from the schedule, one pass over shuffled
    batches, a metrics record, and a checkpoint every ``checkpoint_every``
    epochs and at the end.
    """
    model, optimizer = state.model, state.optimizer
    weights = model.config.loss_weights
    total_epochs = train_config.rounds * train_config.epochs
    log_path = Path(run_dir) / TRAIN_LOG_NAME if run_dir is not None else None

    def log(msg: str) -> None:
        if log_path is not None:
            append_log(log_path, msg)
        if echo is not None:
            echo(msg)

    while state.epoch < total_epochs:
        if max_steps is not None and state.step >= max_steps:
            break
        epoch = state.epoch
        lr = _epoch_lr(epoch, train_config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if hasattr(dataset, "set_epoch"):
            dataset.set_epoch(epoch)
        model.train()
        losses: list[float] = []
        epes: list[float] = []
        for batch_id, batch in enumerate(_loader(dataset, train_config, state.seed, epoch)):
            if max_steps is not None and state.step >= max_steps:
                break
            pred: StereoPrediction = model(batch.left, batch.right)
            terms = stereo_loss(pred.quarter, pred.full, batch.gt_disparity, batch.valid_mask, weights)
            for term in terms.empty_terms:
                log(f"loss: empty mask for {term} term (epoch {epoch}, batch {batch_id})")
            if not torch.isfinite(terms.total):
                msg = f"non-finite loss at epoch {epoch}, batch {batch_id}, step {state.step}"
                log(f"abort: {msg}")
                raise TrainingAborted(msg, epoch=epoch, batch_id=batch_id)
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            if train_config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            optimizer.step()
            state.step += 1
            losses.append(float(terms.total.detach()))
            batch_epe = _batch_epe(pred.full, batch)
            if batch_epe is not None:
                epes.append(batch_epe)

        record = {
            "epoch": epoch,
            "step": state.step,
            "lr": lr,
            "loss": sum(losses) / len(losses) if losses else None,
            "train_epe": sum(epes) / len(epes) if epes else None,
        }
        if val_dataset is not None:
            report = evaluate_model(model, val_dataset)
            record["val_epe"] = report.epe
            state.best_epe = min(state.best_epe, report.epe)
        elif record["train_epe"] is not None:
            state.best_epe = min(state.best_epe, record["train_epe"])
        state.history.append(record)
        state.epoch += 1

        if run_dir is not None:
            append_jsonl(Path(run_dir) / METRICS_LOG_NAME, record)
            last = state.epoch >= total_epochs or (max_steps is not None and state.step >= max_steps)
            if state.epoch % train_config.checkpoint_every == 0 or last:
                save_checkpoint(Path(run_dir) / "checkpoint.pt", state, train_config)
        log(
            f"epoch {epoch} step {state.step} lr {lr:.3g} loss {_fmt(record['loss'])} "
            f"train_epe {_fmt(record['train_epe'])}"
            + (f" val_epe {_fmt(record['val_epe'])}" if "val_epe" in record else "")
        )
    return state


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict(model: GhostStereo, left: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
    """Full-resolution disparity for inputs of any size (padded, then cropped back)."""
    model.eval()
    padded_left, size = pad_to_multiple(left)
    padded_right, _ = pad_to_multiple(right)
    pred = model(padded_left, padded_right)
    return crop_to_size(pred.full.values, size)


@torch.no_grad()
def evaluate_model(model: GhostStereo, dataset) -> MetricReport:
    """Metric suite over every valid pixel of ``dataset`` (one sample at a time)."""
    preds, gts, masks, objs = [], [], [], []
    for i in range(len(dataset)):
        sample = dataset[i]
        if sample.gt_disparity is None:
            continue
        pred = predict(model, sample.left.unsqueeze(0), sample.right.unsqueeze(0))[0]
        preds.append(pred.reshape(-1))
        gts.append(sample.gt_disparity.reshape(-1))
        masks.append(sample.valid_mask.reshape(-1))
        objs.append(None if sample.obj_mask is None else sample.obj_mask.reshape(-1))
    if not preds:
        raise ConfigError("dataset has no samples with ground truth")
    obj = torch.cat(objs) if all(o is not None for o in objs) else None
    return evaluate(torch.cat(preds), torch.cat(gts), torch.cat(masks), obj)
