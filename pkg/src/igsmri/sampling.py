"""Line sampling patterns, baseline generators and zero-filled undersampling.

A pattern is a binary vector over the k-space columns (phase-encode lines).
It is broadcast down every row of the centered spectrum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .grid import DEFAULT_EPS, fft2_unitary, ifft2_unitary, magnitude_smooth


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (Python's round() is banker's)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def lines_budget(n_lines: int, accel: float) -> int:
    """Number of sampled lines ``round(n_lines / accel)`` for a speed-up factor."""
    if accel < 1:
        raise ValueError(f"acceleration must be >= 1, got {accel}")
    budget = round_half_away(n_lines / accel)
    return min(max(budget, 1), n_lines)


@dataclass(frozen=True)
class AccelerationSpec:
    accel: float

    def __post_init__(self) -> None:
        if not self.accel >= 1:
            raise ValueError(f"acceleration must be >= 1, got {self.accel}")

    def budget(self, n_lines: int) -> int:
        return lines_budget(n_lines, self.accel)


@dataclass(frozen=True, eq=False)
class SamplingPattern:
    """Binary selection over ``width`` k-space lines.

    ``transition_log`` keeps the order in which lines were added (empty for
    baselines that are generated in one shot).
    """

    mask: np.ndarray
    transition_log: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask)
        if mask.ndim != 1 or mask.size < 1:
            raise ValueError("pattern mask must be a non-empty 1D vector")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("pattern mask must be binary")
        mask = mask.astype(bool).copy()
        mask.setflags(write=False)
        log = tuple(int(i) for i in self.transition_log)
        if len(set(log)) != len(log):
            raise ValueError("transition log contains duplicate lines")
        for i in log:
            if not 0 <= i < mask.size or not mask[i]:
                raise ValueError(f"transition log entry {i} is not a selected line")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "transition_log", log)

    @classmethod
    def from_indices(
        cls, width: int, indices: Iterable[int], transition_log: Sequence[int] = ()
    ) -> "SamplingPattern":
        mask = np.zeros(width, dtype=bool)
        idx = list(indices)
        for i in idx:
            if not 0 <= i < width:
                raise ValueError(f"line index {i} out of range [0, {width})")
        mask[idx] = True
        return cls(mask, tuple(transition_log))

    @property
    def width(self) -> int:
        return int(self.mask.size)

    @property
    def indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.mask)]

    @property
    def cardinality(self) -> int:
        return int(self.mask.sum())

    def as_float(self) -> np.ndarray:
        return self.mask.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SamplingPattern):
            return NotImplemented
        return (
            np.array_equal(self.mask, other.mask)
            and self.transition_log == other.transition_log
        )

    def __hash__(self) -> int:
        return hash((self.mask.tobytes(), self.transition_log))

    def __repr__(self) -> str:
        return f"SamplingPattern(width={self.width}, lines={self.indices})"


def _check_budget(n_lines: int, budget: int) -> None:
    if n_lines < 1 or budget < 1:
        raise ValueError("n_lines and budget must be positive")
    if budget > n_lines:
        raise ValueError(f"budget {budget} exceeds number of lines {n_lines}")


def center_pattern(n_lines: int, budget: int) -> SamplingPattern:
    """Contiguous block of ``budget`` lowest-frequency lines around ``n_lines // 2``."""
    _check_budget(n_lines, budget)
    start = n_lines // 2 - budget // 2
    return SamplingPattern.from_indices(n_lines, range(start, start + budget))


def equispaced_pattern(n_lines: int, budget: int, offset: int = 0) -> SamplingPattern:
    _check_budget(n_lines, budget)
    if offset < 0:
        raise ValueError("offset must be non-negative")
    chosen = []
    for k in range(budget):
        idx = round_half_away(offset + k * n_lines / budget) % n_lines
        if idx not in chosen:
            chosen.append(idx)
    # top up from the lowest unused index when rounding collided
    fill = (i for i in range(n_lines) if i not in chosen)
    while len(chosen) < budget:
        chosen.append(next(fill))
    return SamplingPattern.from_indices(n_lines, chosen)


def fastmri_center_fraction(accel: float) -> float:
    """Default fully-sampled center fraction, 0.32 / accel (0.08 at x4)."""
    return 0.32 / accel


def fastmri_style_pattern(
    n_lines: int, budget: int, center_fraction: float, seed: int
) -> SamplingPattern:
    """Fully sampled center block plus uniformly random outer lines.

    The center block holds ``round(center_fraction * n_lines)`` lines, never
    fewer than one. The rest of the budget is drawn without replacement.
    """
    _check_budget(n_lines, budget)
    if not 0 < center_fraction < 1:
        raise ValueError("center_fraction must lie in (0, 1)")
    n_center = max(1, round_half_away(center_fraction * n_lines))
    if n_center > budget:
        raise ValueError(
            f"center block of {n_center} lines exceeds budget {budget}"
        )
    start = n_lines // 2 - n_center // 2
    center = list(range(start, start + n_center))
    outer = np.array([i for i in range(n_lines) if not start <= i < start + n_center])
    rng = np.random.default_rng(seed)
    extra = rng.choice(outer, size=budget - n_center, replace=False) if budget > n_center else []
    return SamplingPattern.from_indices(n_lines, center + [int(i) for i in extra])


def mask_kspace(k: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Multiply every row of a centered spectrum by the per-line weights."""
    return k * np.asarray(weights)


def apply_pattern(
    img: np.ndarray, pat: SamplingPattern | np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Zero-filled reconstruction: magnitude of iFFT(FFT(img) * w)."""
    img = np.asarray(img, dtype=np.float64)
    w = pat.as_float() if isinstance(pat, SamplingPattern) else np.asarray(pat, dtype=np.float64)
    if w.shape[-1] != img.shape[-1]:
        raise ValueError(
            f"pattern width {w.shape[-1]} does not match image width {img.shape[-1]}"
        )
    return magnitude_smooth(ifft2_unitary(mask_kspace(fft2_unitary(img), w)), eps)


def kspace_energy(img: np.ndarray, pat: SamplingPattern) -> float:
    """Energy of the spectrum retained by the pattern."""
    k = fft2_unitary(np.asarray(img, dtype=np.float64))
    return float(np.sum(np.abs(k[..., pat.mask]) ** 2))
