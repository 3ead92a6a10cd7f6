"""Target losses with analytic gradients, and reporting metrics.

Every loss treats the trailing axes as one sample (an image, or a pair of
class scores for cross-entropy). Extra leading axes are a batch: the value
then has the batch shape and the gradient is taken per sample.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import numpy as np

Value = Union[float, np.ndarray]

BCE_CLAMP = 1e-7


class LossKind(str, enum.Enum):
    DICE = "dice"
    BCE = "bce"
    L1 = "l1"
    SSIM = "ssim"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    dynamic_range: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not self.dynamic_range > 0:
            raise ValueError("dynamic_range must be positive")

    @property
    def ssim_c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def ssim_c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossResult:
    value: Value
    grad: np.ndarray


def _scalar(v: np.ndarray) -> Value:
    return float(v) if np.ndim(v) == 0 else v


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _sample_axes(a: np.ndarray, sample_ndim: int | None) -> tuple[int, ...]:
    if sample_ndim is None:
        sample_ndim = 2 if a.ndim >= 2 else 1
    if not 1 <= sample_ndim <= a.ndim:
        raise ValueError(f"cannot take {sample_ndim}-D samples from shape {a.shape}")
    return tuple(range(a.ndim - sample_ndim, a.ndim))


def dice_loss(y: np.ndarray, yhat: np.ndarray, sample_ndim: int | None = None) -> LossResult:
    """Soft Dice loss ``1 - (2 sum(y*yhat) + 1) / (sum(y) + sum(yhat) + 1)``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    _same_shape(y, yhat)
    if np.any(yhat < 0) or np.any(yhat > 1):
        raise ValueError("Dice predictions must lie in [0, 1]")
    axes = _sample_axes(y, sample_ndim)
    inter = np.sum(y * yhat, axis=axes, keepdims=True)
    total = np.sum(y, axis=axes, keepdims=True) + np.sum(yhat, axis=axes, keepdims=True) + 1.0
    num = 2.0 * inter + 1.0
    value = 1.0 - num / total
    grad = -(2.0 * y * total - num) / total**2
    return LossResult(_scalar(np.squeeze(value, axis=axes)), grad)


def bce_loss(y: np.ndarray, yhat: np.ndarray) -> LossResult:
    """Cross-entropy ``-sum_i y_i log(yhat_i)`` over the two class scores."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    _same_shape(y, yhat)
    if y.shape[-1] != 2:
        raise ValueError("cross-entropy expects two class scores on the last axis")
    if np.any(yhat < -1e-12) or np.any(yhat > 1 + 1e-12) or not np.all(np.isfinite(yhat)):
        raise ValueError("cross-entropy scores must be probabilities in [0, 1]")
    p = np.clip(yhat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -np.sum(y * np.log(p), axis=-1)
    return LossResult(_scalar(value), -y / p)


def bce_map_loss(y: np.ndarray, yhat: np.ndarray, sample_ndim: int | None = None) -> LossResult:
    """Per-pixel cross-entropy of ``(p, 1 - p)`` pairs, averaged over each sample.

    Probabilities outside the clamp band are clipped, so their gradient is 0.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    _same_shape(y, yhat)
    if not np.all(np.isfinite(yhat)):
        raise ValueError("cross-entropy scores must be finite")
    axes = _sample_axes(y, sample_ndim)
    n = int(np.prod([y.shape[a] for a in axes]))
    p = np.clip(yhat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p), axis=axes) / n
    inside = (yhat >= BCE_CLAMP) & (yhat <= 1.0 - BCE_CLAMP)
    grad = np.where(inside, -(y / p - (1.0 - y) / (1.0 - p)) / n, 0.0)
    return LossResult(_scalar(value), grad)


L1_TIE_RTOL = 1e-12


def l1_loss(x: np.ndarray, xhat: np.ndarray, sample_ndim: int | None = None) -> LossResult:
    """Per-pixel mean absolute error; gradient is w.r.t. ``xhat``.

    The subgradient at a tie is 0. Differences below ``L1_TIE_RTOL`` times
    the sample's largest magnitude count as ties, so round-off from an exact
    reconstruction does not produce spurious +-1 signs.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    _same_shape(x, xhat)
    axes = _sample_axes(x, sample_ndim)
    count = np.prod([x.shape[a] for a in axes])
    diff = x - xhat
    value = np.sum(np.abs(diff), axis=axes) / count
    scale = np.maximum(np.max(np.abs(x), axis=axes, keepdims=True),
                       np.max(np.abs(xhat), axis=axes, keepdims=True))
    sign = np.where(np.abs(diff) <= L1_TIE_RTOL * scale, 0.0, np.sign(diff))
    return LossResult(_scalar(value), -sign / count)


def _moments(x: np.ndarray, y: np.ndarray, axes):
    mx = np.mean(x, axis=axes, keepdims=True)
    my = np.mean(y, axis=axes, keepdims=True)
    dx = x - mx
    dy = y - my
    vx = np.mean(dx * dx, axis=axes, keepdims=True)
    vy = np.mean(dy * dy, axis=axes, keepdims=True)
    cxy = np.mean(dx * dy, axis=axes, keepdims=True)
    return mx, my, dx, dy, vx, vy, cxy


def ssim_loss(
    x: np.ndarray,
    xhat: np.ndarray,
    spec: LossSpec | None = None,
    sample_ndim: int | None = None,
) -> LossResult:
    """Negative global SSIM, using whole-image means, variances and covariance.

    Population (1/n) moments are used throughout.
    """
    spec = spec or LossSpec(LossKind.SSIM)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(xhat, dtype=np.float64)
    _same_shape(x, y)
    axes = _sample_axes(x, sample_ndim)
    n = np.prod([x.shape[a] for a in axes])
    c1, c2 = spec.ssim_c1, spec.ssim_c2
    mx, my, dx, dy, vx, vy, cxy = _moments(x, y, axes)
    a1 = 2 * mx * my + c1
    a2 = 2 * cxy + c2
    b1 = mx**2 + my**2 + c1
    b2 = vx + vy + c2
    s = a1 * a2 / (b1 * b2)
    # d/dy_i of each factor
    da1 = 2 * mx / n
    da2 = 2 * dx / n
    db1 = 2 * my / n
    db2 = 2 * dy / n
    ds = (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2)
    return LossResult(_scalar(-np.squeeze(s, axis=axes)), -ds)


def evaluate_loss(
    spec: LossSpec,
    target: np.ndarray,
    prediction: np.ndarray,
    sample_ndim: int | None = None,
) -> LossResult:
    """Dispatch on ``spec.kind``; target first, prediction second."""
    if spec.kind is LossKind.DICE:
        return dice_loss(target, prediction, sample_ndim)
    if spec.kind is LossKind.BCE:
        if sample_ndim is not None and sample_ndim >= 2:
            return bce_map_loss(target, prediction, sample_ndim)
        return bce_loss(target, prediction)
    if spec.kind is LossKind.L1:
        return l1_loss(target, prediction, sample_ndim)
    return ssim_loss(target, prediction, spec, sample_ndim)


# -- reporting metrics -------------------------------------------------------


def ssim_index(x: np.ndarray, xhat: np.ndarray, dynamic_range: float = 1.0) -> Value:
    """Global SSIM in [-1, 1]; the negation of :func:`ssim_loss`."""
    res = ssim_loss(x, xhat, LossSpec(LossKind.SSIM, dynamic_range))
    return -res.value


def psnr(x: np.ndarray, xhat: np.ndarray, dynamic_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    _same_shape(x, xhat)
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        raise ValueError("PSNR is undefined for identical images")
    return 10.0 * np.log10(dynamic_range**2 / mse)


def nmse(x: np.ndarray, xhat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    _same_shape(x, xhat)
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("NMSE reference image is all zero")
    return float(np.sum((x - xhat) ** 2)) / ref


def dice_score(y: np.ndarray, yhat: np.ndarray, threshold: float = 0.5) -> float:
    """Hard Dice overlap of a binary mask and a thresholded prediction.

    Two empty masks score 1.
    """
    y = np.asarray(y) > 0.5
    pred = np.asarray(yhat) >= threshold
    denom = y.sum() + pred.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(y, pred).sum() / denom)


def f1_accuracy(labels: np.ndarray, predicted: np.ndarray) -> tuple[float, float]:
    """Binary F1 (positive class = 1) and accuracy."""
    labels = np.asarray(labels).astype(bool)
    predicted = np.asarray(predicted).astype(bool)
    tp = int(np.sum(labels & predicted))
    fp = int(np.sum(~labels & predicted))
    fn = int(np.sum(labels & ~predicted))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    return float(f1), float(np.mean(labels == predicted))
