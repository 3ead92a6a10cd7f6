"""Iterative gradient sampling: greedy line selection from pattern gradients.

Starting from the center line, each iteration differentiates the summed
task loss with respect to a real-valued relaxation of the pattern, then
switches on the unselected line whose derivative is most negative.

The reverse chain for one sample is::

    loss -> head input -> smooth magnitude -> adjoint iFFT (= FFT) -> per-line sum

with ``dL/dw[j] = sum_rows Re(conj(K[r, j]) * G[r, j])``, where ``K`` is the
centered spectrum of the clean image and ``G`` the k-space gradient.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import DEFAULT_EPS, fft2_unitary, ifft2_unitary, magnitude_smooth
from .heads import Head, HeadKind, head_value_and_grads
from .losses import LossKind, LossSpec
from .sampling import SamplingPattern

logger = logging.getLogger(__name__)

# Samples are processed in fixed-size chunks so that per-sample results do
# not depend on how many workers are used.
CHUNK = 16


class NumericError(FloatingPointError):
    """A gradient or loss became non-finite."""


@dataclass(frozen=True)
class IgsConfig:
    budget: int
    loss: LossSpec
    head: Head
    eps_mag: float = DEFAULT_EPS
    batch_limit: int | None = None
    keep_gradients: bool = False
    jobs: int = 1


@dataclass
class IgsStep:
    iteration: int
    chosen_line: int
    mean_loss: float
    gradient: np.ndarray | None = None


@dataclass
class IgsTrace:
    steps: list[IgsStep] = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def chosen(self) -> list[int]:
        return [s.chosen_line for s in self.steps]

    def losses(self) -> list[float]:
        """Mean loss before each transition, followed by the final mean loss."""
        return [s.mean_loss for s in self.steps] + [self.final_loss]

    def to_csv(self) -> str:
        rows = ["iteration,chosen_line,mean_loss"]
        rows += [f"{s.iteration},{s.chosen_line},{s.mean_loss!r}" for s in self.steps]
        return "\n".join(rows) + "\n"


def _weights(pat) -> np.ndarray:
    if isinstance(pat, SamplingPattern):
        return pat.as_float()
    return np.asarray(pat, dtype=np.float64)


def _chunk_terms(images, targets, w, head, loss, eps, want_grad):
    """Per-sample losses and (optionally) per-sample pattern gradients."""
    kspace = fft2_unitary(images)
    z = ifft2_unitary(kspace * w)
    xhat = magnitude_smooth(z, eps)
    values, dx, _ = head_value_and_grads(head, xhat, targets, loss,
                                         need_input=want_grad, need_params=False)
    if not want_grad:
        return values, None
    gz = dx * z / xhat
    gk = fft2_unitary(gz)
    grads = np.sum(kspace.real * gk.real + kspace.imag * gk.imag, axis=-2)
    return values, grads


def _per_sample(images, targets, pat, head, loss, eps, want_grad, jobs):
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"expected a (n, H, W) image stack, got shape {images.shape}")
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if len(targets) != len(images):
        raise ValueError("images and targets differ in length")
    w = _weights(pat)
    if w.shape != (images.shape[-1],):
        raise ValueError(
            f"pattern width {w.shape} does not match image width {images.shape[-1]}"
        )
    starts = list(range(0, len(images), CHUNK))

    def work(start):
        sl = slice(start, start + CHUNK)
        return _chunk_terms(images[sl], targets[sl], w, head, loss, eps, want_grad)

    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    values = np.concatenate([p[0] for p in parts])
    grads = np.concatenate([p[1] for p in parts]) if want_grad else None
    return values, grads


def sample_losses(images, targets, pat, head: Head, loss: LossSpec,
                  eps: float = DEFAULT_EPS, jobs: int = 1) -> np.ndarray:
    """Loss of every sample after undersampling with a (possibly relaxed) pattern."""
    values, _ = _per_sample(images, targets, pat, head, loss, eps, False, jobs)
    return values


def dataset_loss(images, targets, pat, head: Head, loss: LossSpec,
                 eps: float = DEFAULT_EPS, jobs: int = 1) -> float:
    """Sum of per-sample losses, reduced in sample order."""
    return float(np.sum(sample_losses(images, targets, pat, head, loss, eps, jobs)))


def mask_gradient(images, targets, pat, head: Head, loss: LossSpec,
                  eps: float = DEFAULT_EPS, jobs: int = 1) -> np.ndarray:
    """Derivative of the summed dataset loss w.r.t. each pattern entry.

    ``pat`` may be a :class:`SamplingPattern` or any real vector of width W.
    """
    values, grads = _per_sample(images, targets, pat, head, loss, eps, True, jobs)
    bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=1) | ~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite pattern gradient for sample {int(bad[0])}")
    return np.sum(grads, axis=0)


def igs_select_line(grad: np.ndarray, pat: SamplingPattern | np.ndarray) -> int:
    """Index of the most negative gradient among unselected lines (lowest index on ties)."""
    grad = np.asarray(grad, dtype=np.float64)
    selected = pat.mask if isinstance(pat, SamplingPattern) else np.asarray(pat).astype(bool)
    if grad.shape != selected.shape:
        raise ValueError("gradient and pattern widths differ")
    if selected.all():
        raise ValueError("all lines are already selected")
    return int(np.argmin(np.where(selected, np.inf, grad)))


def seed_pattern(width: int) -> SamplingPattern:
    center = width // 2
    return SamplingPattern.from_indices(width, [center], [center])


def _subsample(n: int, limit: int | None) -> np.ndarray:
    if limit is None or limit >= n:
        return np.arange(n)
    # evenly spaced, deterministic
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def igs_run(images, targets, config: IgsConfig) -> tuple[SamplingPattern, IgsTrace]:
    """Greedy pattern search up to ``config.budget`` lines."""
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    width = images.shape[-1]
    if not 1 <= config.budget <= width:
        raise ValueError(f"budget {config.budget} outside [1, {width}]")
    idx = _subsample(len(images), config.batch_limit)
    images, targets = images[idx], targets[idx]
    # with a plain L1 reconstruction loss on nonnegative images, acquiring
    # more energy should never look harmful to first order
    check_identity = (config.head.kind is HeadKind.IDENTITY
                      and config.loss.kind is LossKind.L1
                      and float(images.min()) >= 0.0)
    pat = seed_pattern(width)
    trace = IgsTrace()
    for it in range(config.budget - 1):
        values, grads = _per_sample(images, targets, pat, config.head, config.loss,
                                    config.eps_mag, True, config.jobs)
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(grads), axis=1))[0])
            raise NumericError(f"non-finite pattern gradient for sample {bad} at iteration {it}")
        grad = np.sum(grads, axis=0)
        if check_identity:
            bad = identity_consistency_violations(grad, pat)
            if bad:
                raise NumericError(
                    f"identity-consistency violated at iteration {it}: positive pattern "
                    f"derivative on unselected lines {bad} (max {float(grad[bad].max()):.3e})"
                )
        line = igs_select_line(grad, pat)
        trace.steps.append(IgsStep(it, line, float(np.mean(values)),
                                   grad.copy() if config.keep_gradients else None))
        logger.debug("iteration %d: line %d, mean loss %.6g", it, line, np.mean(values))
        pat = SamplingPattern.from_indices(width, pat.indices + [line],
                                           pat.transition_log + (line,))
    trace.final_loss = float(np.mean(sample_losses(images, targets, pat, config.head,
                                                   config.loss, config.eps_mag, config.jobs)))
    return pat, trace


def identity_consistency_violations(grad: np.ndarray, pat: SamplingPattern,
                                    tol: float = 1e-12) -> list[int]:
    """Unselected lines whose pattern derivative is positive beyond ``tol``.

    ``tol`` is relative to the largest derivative magnitude (floored at 1).
    """
    grad = np.asarray(grad)
    limit = tol * max(1.0, float(np.max(np.abs(grad))))
    return [int(j) for j in np.flatnonzero(~pat.mask & (grad > limit))]

