"""Training loop: forward, composite loss, backward, AdamW with accumulation."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from relayformer.config import RunConfig
from relayformer.errors import ContractError, DivergenceError, NonFiniteError
from relayformer.harness.checkpoint import save_checkpoint
from relayformer.harness.synthetic import SyntheticSample, to_model_input
from relayformer.losses import combined_loss, edge_mask_from_gt, f1_at_threshold, iou
from relayformer.model import RelayFormer, is_added_parameter, predict_batch
from relayformer.nn import make_rng
from relayformer.numerics import CosineSchedule, OptimState, adamw_step, no_grad

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "loss", "f1", "iou", "lr")


@dataclass
class Batch:
    inputs: np.ndarray  # [B, T, H, W, C] float
    masks: np.ndarray  # [B, T, H, W] {0, 1}
    edges: np.ndarray  # [B, T, H, W] {0, 1}
    indices: list[int]


@dataclass
class TrainResult:
    model: RelayFormer
    history: list[dict]
    steps: int
    state: OptimState
    checkpoint: Path | None = None
    metrics_csv: Path | None = None
    final: dict = field(default_factory=dict)


def _dtype(run: RunConfig):
    return np.float32 if run.model.dtype == "f32" else np.float64


def make_batch(samples: Sequence[SyntheticSample], indices: Sequence[int], run: RunConfig, flips: np.ndarray | None = None) -> Batch:
    clips = np.stack([samples[i].clip for i in indices])
    masks = np.stack([samples[i].mask for i in indices])
    if flips is not None and flips.any():
        clips[flips] = clips[flips][:, :, :, ::-1]
        masks[flips] = masks[flips][:, :, :, ::-1]
    edges = edge_mask_from_gt(masks, run.edge_width)
    dt = _dtype(run)
    return Batch(to_model_input(clips, dt), masks.astype(dt), edges.astype(dt), list(indices))


def _micro_batches(samples: Sequence[SyntheticSample], order: np.ndarray, size: int) -> list[list[int]]:
    """Split an epoch order into batches of one clip geometry each."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i in order:
        groups[samples[i].clip.shape].append(int(i))
    out = []
    for members in groups.values():
        out.extend(members[k:k + size] for k in range(0, len(members), size))
    return out


def sample_scores(probs: np.ndarray, masks: np.ndarray) -> tuple[list[float], list[float]]:
    """Per-sample F1@0.5 and IoU over ``[B, ...]`` maps."""
    f1s, ious = [], []
    for p, m in zip(probs, masks):
        f1s.append(f1_at_threshold(p, m))
        ious.append(iou(p >= 0.5, m))
    return f1s, ious


def evaluate(model: RelayFormer, samples: Sequence[SyntheticSample], run: RunConfig, one_shot: bool | None = None) -> dict:
    """Per-sample and mean F1/IoU on ``samples`` without tracking gradients."""
    one_shot = run.one_shot if one_shot is None else one_shot
    f1s, ious = [0.0] * len(samples), [0.0] * len(samples)
    with no_grad():
        for idx in _micro_batches(samples, np.arange(len(samples)), run.batch_size):
            b = make_batch(samples, idx, run)
            probs = predict_batch(model, b.inputs, one_shot).probs.data
            f, i = sample_scores(probs, b.masks)
            for k, j in enumerate(idx):
                f1s[j], ious[j] = f[k], i[k]
    return {"f1": float(np.mean(f1s)), "iou": float(np.mean(ious)), "per_sample_f1": f1s, "per_sample_iou": ious}


def format_row(row: dict) -> list[str]:
    return [str(row["epoch"])] + [repr(float(row[k])) for k in CSV_FIELDS[1:]]


def metrics_csv_text(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in history:
        w.writerow(format_row(row))
    return buf.getvalue()


def train(
    run: RunConfig,
    samples: Sequence[SyntheticSample],
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a fresh model on ``samples`` for ``run.steps`` optimizer steps.

    Each optimizer step consumes ``accumulation_steps`` micro-batches of up to
    ``batch_size`` samples; the loss of each micro-batch is divided by the
    accumulation count so the summed gradient is an average. One CSV row is
    logged per pass over the data. With ``out_dir`` the run writes
    ``config.json``, ``metrics.csv`` and ``checkpoint/``.
    """
    run.validate()
    if not samples:
        raise ContractError("training needs at least one sample")
    if samples[0].clip.shape[-1] != run.model.in_channels:
        raise ContractError(f"samples have {samples[0].clip.shape[-1]} channels, model expects {run.model.in_channels}")
    with threadpool_limits(limits=run.threads):
        return _train(run, samples, out_dir, on_epoch)


def _train(run, samples, out_dir, on_epoch) -> TrainResult:
    model = RelayFormer(run.model)
    params = model.parameters()
    added = {k: v for k, v in params.items() if is_added_parameter(k)}
    oc = run.optim
    schedule = CosineSchedule(oc.lr, oc.min_lr, oc.warmup_steps, max(run.steps, 1))
    state = OptimState(schedule, oc.weight_decay, oc.beta1, oc.beta2, oc.eps)
    rng = make_rng(run.seed)
    accum = oc.accumulation_steps

    history: list[dict] = []
    pending = 0
    lr = schedule.lr_at(1) if run.steps else 0.0
    epoch = 0
    while state.step_count < run.steps:
        epoch += 1
        order = rng.permutation(len(samples))
        flips = rng.random(len(samples)) < 0.5 if run.data.hflip else None
        trainable = added if epoch <= oc.freeze_backbone_epochs else params
        losses, f1s, ious = [], [], []
        for idx in _micro_batches(samples, order, run.batch_size):
            b = make_batch(samples, idx, run, None if flips is None else flips[idx])
            try:
                probs = predict_batch(model, b.inputs, run.one_shot).probs
                loss = combined_loss(probs, b.masks, b.edges, run.edge_lambda)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite forward at epoch {epoch}, step {state.step_count}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {state.step_count}, lr {lr:.3g}")
            (loss * (1.0 / accum)).backward()
            losses.append(value)
            f, i = sample_scores(probs.data, b.masks)
            f1s += f
            ious += i
            pending += 1
            if pending == accum:
                lr = adamw_step(trainable, state)
                model.zero_grad()
                pending = 0
                if state.step_count >= run.steps:
                    break
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "f1": float(np.mean(f1s)),
               "iou": float(np.mean(ious)), "lr": lr}
        history.append(row)
        log.info("epoch %d step %d loss %.5f f1 %.4f iou %.4f lr %.3g",
                 epoch, state.step_count, row["loss"], row["f1"], row["iou"], lr)
        if on_epoch is not None:
            on_epoch(row)
    model.zero_grad()

    result = TrainResult(model=model, history=history, steps=state.step_count, state=state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        run.save(out / "config.json")
        result.metrics_csv = out / "metrics.csv"
        result.metrics_csv.write_text(metrics_csv_text(history))
        result.checkpoint = out / "checkpoint"
        save_checkpoint(result.checkpoint, model, run, extra={"steps": state.step_count, "epochs": epoch})
    return result
