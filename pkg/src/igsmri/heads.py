"""Small differentiable task heads and their Adam trainer.

Three heads consume a (batch of) magnitude image(s):

* ``IDENTITY``   returns the image unchanged (reconstruction tasks);
* ``SEGMENTER``  conv(k x k, C) -> ReLU -> 1x1 conv -> per-pixel sigmoid;
* ``CLASSIFIER`` the same trunk -> log-sum-exp global pool -> logistic
  pair (p, 1 - p).

The classifier pool is ``(1 / beta) * log(mean(exp(beta * z)))`` over the
per-pixel logit map ``z``. ``beta -> 0`` recovers the plain global mean; a
positive ``beta`` (``pool_sharpness``) lets a few lesion pixels dominate,
and its pixel weights are a softmax that sums to one per image, so the
gradient never vanishes however confident the trunk is.

Convolutions are cross-correlations with "same" zero padding. Forward and
backward passes are written out by hand on top of an im2col view.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .losses import LossKind, LossSpec, evaluate_loss

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2")
DEFAULT_POOL_SHARPNESS = 1.0


class HeadKind(str, enum.Enum):
    IDENTITY = "identity"
    SEGMENTER = "segmenter"
    CLASSIFIER = "classifier"


@dataclass
class Head:
    kind: HeadKind
    channels: int = 8
    kernel: int = 5
    params: dict[str, np.ndarray] = field(default_factory=dict)
    pool_sharpness: float = DEFAULT_POOL_SHARPNESS

    def __post_init__(self) -> None:
        self.kind = HeadKind(self.kind)
        if not (np.isfinite(self.pool_sharpness) and self.pool_sharpness >= 0):
            raise ValueError("pool_sharpness must be finite and nonnegative")
        if self.kind is not HeadKind.IDENTITY:
            if self.kernel % 2 != 1:
                raise ValueError("kernel size must be odd for 'same' padding")
            expected = param_shapes(self.kind, self.channels, self.kernel)
            for name, shape in expected.items():
                if name not in self.params:
                    raise ValueError(f"missing head parameter {name!r}")
                if self.params[name].shape != shape:
                    raise ValueError(
                        f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}"
                    )
                if not np.all(np.isfinite(self.params[name])):
                    raise ValueError(f"parameter {name!r} is not finite")

    @property
    def output_ndim(self) -> int:
        """Number of trailing axes forming one prediction."""
        return 1 if self.kind is HeadKind.CLASSIFIER else 2

    def copy(self) -> "Head":
        return Head(self.kind, self.channels, self.kernel,
                    {k: v.copy() for k, v in self.params.items()}, self.pool_sharpness)


def param_shapes(kind: HeadKind, channels: int, kernel: int) -> dict[str, tuple[int, ...]]:
    if HeadKind(kind) is HeadKind.IDENTITY:
        return {}
    return {"w1": (channels, kernel, kernel), "b1": (channels,), "w2": (channels,), "b2": ()}


def identity_head() -> Head:
    return Head(HeadKind.IDENTITY)


def init_head(kind: HeadKind | str, seed: int = 0, channels: int = 8, kernel: int = 5) -> Head:
    """Uniform weights in +-1/sqrt(k*k) drawn from ``seed``; zero biases."""
    kind = HeadKind(kind)
    if kind is HeadKind.IDENTITY:
        return identity_head()
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(kernel * kernel)
    params = {
        "w1": rng.uniform(-bound, bound, size=(channels, kernel, kernel)),
        "b1": np.zeros(channels),
        "w2": rng.uniform(-bound, bound, size=channels),
        "b2": np.zeros(()),
    }
    return Head(kind, channels, kernel, params)


def classifier_from_segmenter(seg: Head,
                              pool_sharpness: float = DEFAULT_POOL_SHARPNESS) -> Head:
    """Classifier sharing a trained segmenter's parameters.

    The segmenter's per-pixel logit is positive on lesion pixels only, so its
    smooth maximum is already a usable lesion-presence logit.
    """
    if seg.kind is not HeadKind.SEGMENTER:
        raise ValueError(f"expected a segmenter head, got {seg.kind.value}")
    return Head(HeadKind.CLASSIFIER, seg.channels, seg.kernel,
                {k: v.copy() for k, v in seg.params.items()}, pool_sharpness)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _pool(z: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp mean over the last two axes and its per-pixel weights."""
    n = z.shape[-1] * z.shape[-2]
    if beta == 0.0:
        return z.mean(axis=(-2, -1)), np.full(z.shape, 1.0 / n)
    top = z.max(axis=(-2, -1), keepdims=True)
    e = np.exp(beta * (z - top))
    total = e.sum(axis=(-2, -1), keepdims=True)
    pooled = top + np.log(total / n) / beta
    return pooled[..., 0, 0], e / total


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col: (B, H, W) -> (B*H*W, k*k) with zero 'same' padding."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.reshape(-1, k * k)


@dataclass
class _Cache:
    shape: tuple[int, int, int]
    cols: np.ndarray      # (BHW, kk)
    pre: np.ndarray       # (BHW, C) pre-activation
    act: np.ndarray       # (BHW, C) post-ReLU
    out: np.ndarray       # head output
    weights: np.ndarray | None = None  # classifier pooling weights


def _as_batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None], True
    if img.ndim != 3:
        raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {img.shape}")
    return img, False


def _forward(head: Head, x: np.ndarray) -> _Cache:
    b, h, w = x.shape
    k, c = head.kernel, head.channels
    cols = _patches(x, k)
    pre = cols @ head.params["w1"].reshape(c, k * k).T + head.params["b1"]
    act = np.maximum(pre, 0.0)
    z = (act @ head.params["w2"] + head.params["b2"]).reshape(b, h, w)
    if head.kind is HeadKind.SEGMENTER:
        out = sigmoid(z)
    else:
        pooled, weights = _pool(z, head.pool_sharpness)
        p = sigmoid(pooled)
        out = np.stack([p, 1.0 - p], axis=-1)
        return _Cache((b, h, w), cols, pre, act, out, weights)
    return _Cache((b, h, w), cols, pre, act, out)


def head_forward(head: Head, img: np.ndarray) -> np.ndarray:
    """Prediction for one image ``(H, W)`` or a batch ``(B, H, W)``.

    Classifier outputs are ``(p_lesion, 1 - p_lesion)`` pairs.
    """
    if head.kind is HeadKind.IDENTITY:
        return np.asarray(img, dtype=np.float64)
    x, single = _as_batch(img)
    out = _forward(head, x).out
    return out[0] if single else out


def _backward(head: Head, cache: _Cache, upstream: np.ndarray, need_params: bool,
              need_input: bool = True):
    b, h, w = cache.shape
    k, c = head.kernel, head.channels
    out = cache.out
    if head.kind is HeadKind.SEGMENTER:
        if upstream.shape != out.shape:
            raise ValueError(f"upstream shape {upstream.shape} != prediction {out.shape}")
        dz = (upstream * out * (1.0 - out)).reshape(-1)
    else:
        if upstream.shape != out.shape:
            raise ValueError(f"upstream shape {upstream.shape} != prediction {out.shape}")
        p = out[:, 0]
        ds = (upstream[:, 0] - upstream[:, 1]) * p * (1.0 - p)
        dz = (ds[:, None, None] * cache.weights).reshape(-1)
    dpre = np.outer(dz, head.params["w2"]) * (cache.pre > 0)
    grads = None
    if need_params:
        grads = {
            "w1": (dpre.T @ cache.cols).reshape(c, k, k),
            "b1": dpre.sum(axis=0),
            "w2": cache.act.T @ dz,
            "b2": np.asarray(dz.sum()),
        }
    if not need_input:
        return None, grads
    # col2im: scatter each patch gradient back onto the padded input
    dcols = (dpre @ head.params["w1"].reshape(c, k * k)).reshape(b, h, w, k, k)
    p = k // 2
    dxp = np.zeros((b, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w] += dcols[..., i, j]
    return dxp[:, p:p + h, p:p + w], grads


def head_input_gradient(head: Head, img: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the loss w.r.t. the head input, given d loss / d prediction."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if head.kind is HeadKind.IDENTITY:
        if upstream.shape != np.shape(img):
            raise ValueError(f"upstream shape {upstream.shape} != image shape {np.shape(img)}")
        return upstream
    x, single = _as_batch(img)
    if single:
        upstream = upstream[None]
    dx, _ = _backward(head, _forward(head, x), upstream, need_params=False)
    return dx[0] if single else dx


def head_param_gradient(
    head: Head, img: np.ndarray, upstream: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient w.r.t. each parameter, summed over the batch."""
    if head.kind is HeadKind.IDENTITY:
        return {}
    x, single = _as_batch(img)
    upstream = np.asarray(upstream, dtype=np.float64)
    if single:
        upstream = upstream[None]
    _, grads = _backward(head, _forward(head, x), upstream, need_params=True)
    return grads


def head_value_and_grads(head: Head, img: np.ndarray, target: np.ndarray, loss: LossSpec,
                         need_input: bool = True, need_params: bool = True):
    """Per-sample losses plus input- and parameter-gradients of their sum."""
    x, single = _as_batch(img)
    if single:
        target = np.asarray(target)[None]
    if head.kind is HeadKind.IDENTITY:
        res = evaluate_loss(loss, target, x, 2)
        return np.atleast_1d(res.value), res.grad, {}
    cache = _forward(head, x)
    res = evaluate_loss(loss, target, cache.out, head.output_ndim)
    dx, grads = _backward(head, cache, res.grad, need_params, need_input)
    return np.atleast_1d(res.value), dx, grads


class Adam:
    """Adam with bias correction; updates a parameter dict in place."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name in PARAM_NAMES:
            if name not in grads:
                continue
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    head: Head
    losses: list[float]
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def default_loss_for(kind: HeadKind) -> LossSpec:
    if kind is HeadKind.SEGMENTER:
        return LossSpec(LossKind.DICE)
    if kind is HeadKind.CLASSIFIER:
        return LossSpec(LossKind.BCE)
    raise ValueError("the identity head has no trainable parameters")


def _mean_loss(head: Head, images: np.ndarray, targets: np.ndarray, loss: LossSpec,
               chunk: int = 32) -> float:
    total = 0.0
    for start in range(0, len(images), chunk):
        pred = head_forward(head, images[start:start + chunk])
        total += float(np.sum(evaluate_loss(loss, targets[start:start + chunk], pred,
                                            head.output_ndim).value))
    return total / len(images)


def train_head(
    head: Head,
    images: np.ndarray,
    targets: np.ndarray,
    loss: LossSpec | None = None,
    epochs: int = 10,
    batch: int = 8,
    seed: int = 0,
    lr: float = 0.001,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    patience: int | None = None,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the mean per-sample loss.

    ``transform`` maps clean images to network inputs (e.g. a fixed
    undersampling pattern for fine-tuning); it is applied once up front.
    With ``val`` and ``patience`` set, training stops once the validation
    loss has not improved for ``patience`` epochs and the best parameters
    are returned.
    """
    if head.kind is HeadKind.IDENTITY:
        raise ValueError("the identity head has no trainable parameters")
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if len(images) != len(targets):
        raise ValueError("images and targets differ in length")
    loss = loss or default_loss_for(head.kind)
    if transform is not None:
        images = transform(images)
    head = head.copy()
    opt = Adam(lr=lr)
    rng = np.random.default_rng(seed)
    result = TrainResult(head, [])
    best = (np.inf, head.copy(), None)
    stale = 0
    if val is not None:
        val_images = transform(val[0]) if transform is not None else np.asarray(val[0], float)
        val_targets = np.asarray(val[1], dtype=np.float64)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        running = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            values, _, grads = head_value_and_grads(head, images[idx], targets[idx], loss,
                                                    need_input=False)
            if not np.all(np.isfinite(values)):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            running += float(values.sum())
            opt.step(head.params, {k: g / len(idx) for k, g in grads.items()})
        result.losses.append(running / len(images))
        logger.debug("epoch %d loss %.6f", epoch, result.losses[-1])
        if val is not None:
            vloss = _mean_loss(head, val_images, val_targets, loss)
            result.val_losses.append(vloss)
            if vloss < best[0]:
                best = (vloss, head.copy(), epoch)
                stale = 0
            else:
                stale += 1
                if patience is not None and stale >= patience:
                    break
    if val is not None and patience is not None and best[2] is not None:
        result.head, result.best_epoch = best[1], best[2]
    return result


def head_targets(kind: HeadKind, seg_masks: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Training targets matching a head kind: masks, or one-hot (lesion, no lesion)."""
    if kind is HeadKind.SEGMENTER:
        return np.asarray(seg_masks, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return np.stack([labels, 1.0 - labels], axis=-1)
