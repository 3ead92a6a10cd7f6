"""Brute-force references for checking the analytic search path.

Nothing in the production path imports this module. It provides central
finite differences on the relaxed pattern and an exhaustive one-step greedy
search that evaluates the true loss for every candidate line.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .grid import DEFAULT_EPS
from .heads import Head
from .igs import NumericError, dataset_loss, igs_select_line, mask_gradient, seed_pattern
from .losses import LossSpec
from .sampling import SamplingPattern

DEFAULT_STEP = 1e-4


def fd_mask_gradient(images, targets, pat, head: Head, loss: LossSpec,
                     step: float = DEFAULT_STEP, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of the summed dataset loss, one line at a time."""
    if not 0.0 < step <= 0.1:
        raise ValueError(f"finite-difference step must lie in (0, 0.1], got {step}")
    w = pat.as_float() if isinstance(pat, SamplingPattern) else np.asarray(pat, dtype=np.float64)
    out = np.empty(w.shape[0])
    for j in range(w.shape[0]):
        up, down = w.copy(), w.copy()
        up[j] += step
        down[j] -= step
        hi = dataset_loss(images, targets, up, head, loss, eps)
        lo = dataset_loss(images, targets, down, head, loss, eps)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss when perturbing line {j}")
        out[j] = (hi - lo) / (2.0 * step)
    return out


def exhaustive_greedy_step(images, targets, pat: SamplingPattern, head: Head, loss: LossSpec,
                           eps: float = DEFAULT_EPS) -> tuple[int, dict[int, float]]:
    """Try every unselected line; return the best one and the full loss table.

    Ties go to the lowest index.
    """
    candidates = [j for j in range(pat.width) if not pat.mask[j]]
    if not candidates:
        raise ValueError("all lines are already selected")
    table = {}
    for j in candidates:
        w = pat.as_float()
        w[j] = 1.0
        table[j] = dataset_loss(images, targets, w, head, loss, eps)
    best = min(candidates, key=lambda j: (table[j], j))
    return best, table


def exhaustive_greedy_run(images, targets, budget: int, head: Head, loss: LossSpec,
                          eps: float = DEFAULT_EPS) -> tuple[SamplingPattern, list[float]]:
    """Greedy search that picks each line by true loss instead of the gradient.

    Returns the pattern and the summed loss after every pick (starting with
    the center-only seed).
    """
    width = np.shape(images)[-1]
    if not 1 <= budget <= width:
        raise ValueError(f"budget {budget} outside [1, {width}]")
    pat = seed_pattern(width)
    history = [dataset_loss(images, targets, pat, head, loss, eps)]
    for _ in range(budget - 1):
        line, table = exhaustive_greedy_step(images, targets, pat, head, loss, eps)
        pat = SamplingPattern.from_indices(width, pat.indices + [line],
                                           pat.transition_log + (line,))
        history.append(table[line])
    return pat, history


def rank_of_line(table: dict[int, float], line: int) -> int:
    """1-based rank of ``line`` in a loss table (ties share the better rank)."""
    return 1 + sum(1 for v in table.values() if v < table[line])


@dataclass
class OracleReport:
    """Analytic vs brute-force comparison at one pattern state."""

    analytic: np.ndarray
    finite_difference: np.ndarray
    loss_table: dict[int, float] = field(default_factory=dict)
    chosen_line: int | None = None

    @property
    def max_relative_error(self) -> float:
        scale = np.max(np.abs(self.finite_difference))
        diff = np.max(np.abs(self.analytic - self.finite_difference))
        return float(diff / scale) if scale > 0 else float(diff)

    @property
    def oracle_line(self) -> int:
        return min(self.loss_table, key=lambda j: (self.loss_table[j], j))

    @property
    def chosen_rank(self) -> int | None:
        if self.chosen_line is None:
            return None
        return rank_of_line(self.loss_table, self.chosen_line)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["line", "analytic", "finite_difference", "one_step_loss"])
        for j in range(len(self.analytic)):
            one_step = self.loss_table.get(j)
            writer.writerow([j, repr(float(self.analytic[j])),
                             repr(float(self.finite_difference[j])),
                             "" if one_step is None else repr(float(one_step))])
        return buf.getvalue()


def oracle_report(images, targets, pat: SamplingPattern, head: Head, loss: LossSpec,
                  step: float = DEFAULT_STEP, eps: float = DEFAULT_EPS) -> OracleReport:
    analytic = mask_gradient(images, targets, pat, head, loss, eps)
    fd = fd_mask_gradient(images, targets, pat, head, loss, step, eps)
    _, table = exhaustive_greedy_step(images, targets, pat, head, loss, eps)
    return OracleReport(analytic, fd, table, igs_select_line(analytic, pat))
