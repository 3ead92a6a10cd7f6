"""Shared brute-force references for the test suite."""

import numpy as np
import pytest


def direct_dft_centered(x):
    """O(N^4) centered unitary DFT, written from the definition."""
    x = np.asarray(x, dtype=complex)
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    rows, cols = np.arange(h), np.arange(w)
    for u in range(h):
        for v in range(w):
            fu, fv = u - h // 2, v - w // 2
            phase = np.exp(-2j * np.pi * (fu * rows[:, None] / h + fv * cols[None, :] / w))
            out[u, v] = np.sum(x * phase) / np.sqrt(h * w)
    return out


def direct_idft_centered(k):
    k = np.asarray(k, dtype=complex)
    h, w = k.shape
    out = np.zeros((h, w), dtype=complex)
    fu = np.arange(h) - h // 2
    fv = np.arange(w) - w // 2
    for r in range(h):
        for c in range(w):
            phase = np.exp(2j * np.pi * (fu[:, None] * r / h + fv[None, :] * c / w))
            out[r, c] = np.sum(k * phase) / np.sqrt(h * w)
    return out


def central_difference(f, x, step):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        g[idx] = (f(up) - f(down)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / (scale if scale > 0 else 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
