"""Task definitions, metric evaluation and the pattern comparison protocol."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .heads import Head, HeadKind, head_forward, head_targets, identity_head, train_head
from .igs import CHUNK
from .losses import (
    LossKind,
    LossSpec,
    dice_score,
    f1_accuracy,
    nmse,
    psnr,
    ssim_index,
)
from .phantom import PhantomSet
from .sampling import (
    SamplingPattern,
    apply_pattern,
    center_pattern,
    equispaced_pattern,
    fastmri_center_fraction,
    fastmri_style_pattern,
    lines_budget,
)


class Task(str, enum.Enum):
    RECON_L1 = "recon-l1"
    RECON_SSIM = "recon-ssim"
    SEG = "seg"
    CLS = "cls"

    @property
    def head_kind(self) -> HeadKind:
        return {
            Task.SEG: HeadKind.SEGMENTER,
            Task.CLS: HeadKind.CLASSIFIER,
        }.get(self, HeadKind.IDENTITY)

    @property
    def loss(self) -> LossSpec:
        return LossSpec({
            Task.RECON_L1: LossKind.L1,
            Task.RECON_SSIM: LossKind.SSIM,
            Task.SEG: LossKind.DICE,
            Task.CLS: LossKind.BCE,
        }[self])

    @property
    def needs_head(self) -> bool:
        return self.head_kind is not HeadKind.IDENTITY


def task_targets(task: Task, data: PhantomSet) -> np.ndarray:
    """Ground truth the task loss compares against."""
    if task.head_kind is HeadKind.IDENTITY:
        return data.images
    return head_targets(task.head_kind, data.masks, data.labels)


def resolve_head(task: Task, head: Head | None) -> Head:
    if not task.needs_head:
        return identity_head()
    if head is None:
        raise ValueError(f"task {task.value} requires a trained head")
    if head.kind is not task.head_kind:
        raise ValueError(f"task {task.value} needs a {task.head_kind.value} head, got {head.kind.value}")
    return head


METRIC_COLUMNS = ("ssim", "psnr", "nmse", "dice", "pred", "label", "f1", "accuracy")


@dataclass
class Evaluation:
    """Per-sample rows and summary metrics for one pattern on one dataset."""

    rows: list[dict]
    summary: dict


def _psnr_or_inf(x, xhat) -> float:
    try:
        return psnr(x, xhat)
    except ValueError:
        return math.inf


def _predict(head: Head, images: np.ndarray, jobs: int) -> np.ndarray:
    starts = list(range(0, len(images), CHUNK))

    def work(start):
        return head_forward(head, images[start:start + CHUNK])

    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return np.concatenate(parts)


def evaluate(task: Task, data: PhantomSet, pattern: SamplingPattern,
             head: Head | None = None, jobs: int = 1) -> Evaluation:
    """Undersample every image and score image quality plus the task metric.

    Predictions are computed in fixed chunks, so ``jobs`` never changes the
    result.
    """
    head = resolve_head(task, head)
    if pattern.width != data.images.shape[-1]:
        raise ValueError(
            f"pattern width {pattern.width} does not match image width {data.images.shape[-1]}"
        )
    xu = apply_pattern(data.images, pattern)
    ssim = np.atleast_1d(ssim_index(data.images, xu))
    rows = []
    for i in range(len(data)):
        rows.append({
            "ssim": float(ssim[i]),
            "psnr": _psnr_or_inf(data.images[i], xu[i]),
            "nmse": nmse(data.images[i], xu[i]),
        })
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("ssim", "psnr", "nmse")}
    if task is Task.SEG:
        pred = _predict(head, xu, jobs)
        for i, r in enumerate(rows):
            r["dice"] = dice_score(data.masks[i], pred[i])
        summary["dice"] = float(np.mean([r["dice"] for r in rows]))
    elif task is Task.CLS:
        prob = _predict(head, xu, jobs)[:, 0]
        predicted = (prob >= 0.5).astype(int)
        for i, r in enumerate(rows):
            r["pred"] = int(predicted[i])
            r["label"] = int(data.labels[i])
        summary["f1"], summary["accuracy"] = f1_accuracy(data.labels, predicted)
    return Evaluation(rows, summary)


def finetune(head: Head, task: Task, train: PhantomSet, pattern: SamplingPattern,
             epochs: int, batch: int = 8, seed: int = 0) -> Head:
    """Continue training ``head`` on images undersampled by ``pattern``."""
    if not task.needs_head or epochs <= 0:
        return head
    result = train_head(
        head, train.images, task_targets(task, train), task.loss,
        epochs=epochs, batch=batch, seed=seed,
        transform=lambda x: apply_pattern(x, pattern),
    )
    return result.head


def baseline_pattern(name: str, n_lines: int, accel: float, seed: int = 0) -> SamplingPattern:
    """Named baseline at a given acceleration: center, equispaced or fastmri."""
    budget = lines_budget(n_lines, accel)
    if name == "center":
        return center_pattern(n_lines, budget)
    if name == "equispaced":
        return equispaced_pattern(n_lines, budget, 0)
    if name == "fastmri":
        frac = fastmri_center_fraction(accel)
        frac = max(frac, 1.0 / n_lines)
        return fastmri_style_pattern(n_lines, budget, min(frac, 0.999), seed)
    raise ValueError(f"unknown baseline pattern {name!r}")
