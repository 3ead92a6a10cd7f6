"""Centered, orthonormal 2D Fourier transforms and smooth magnitude.

All transforms act on the last two axes, so a stack of images with shape
``(..., H, W)`` is transformed slice by slice. The zero frequency sits at
index ``(H // 2, W // 2)``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-12

_AXES = (-2, -1)


def _check_grid(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got shape {arr.shape}")
    if arr.shape[-2] < 2 or arr.shape[-1] < 2:
        raise ValueError(f"{name} must be at least 2x2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def fft2_unitary(img: np.ndarray) -> np.ndarray:
    """Forward transform: image -> centered k-space with 1/sqrt(H*W) scaling."""
    img = _check_grid(img, "image")
    return np.fft.fftshift(np.fft.fft2(img, axes=_AXES, norm="ortho"), axes=_AXES)


def ifft2_unitary(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2_unitary`; also its adjoint. Output stays complex."""
    k = _check_grid(k, "k-space grid")
    return np.fft.ifft2(np.fft.ifftshift(k, axes=_AXES), axes=_AXES, norm="ortho")


def magnitude_smooth(k: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel ``sqrt(re^2 + im^2 + eps^2)``, differentiable at zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    k = np.asarray(k)
    return np.sqrt(k.real**2 + k.imag**2 + eps**2)


def magnitude_smooth_grad(k: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Derivative of :func:`magnitude_smooth` packed as a complex array.

    The real part holds d|z|/d(re) and the imaginary part d|z|/d(im), i.e.
    ``z / magnitude_smooth(z)``.
    """
    k = np.asarray(k)
    return k / magnitude_smooth(k, eps)
