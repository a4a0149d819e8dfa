"""Pixel-level image quality: SSIM and PSNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SSIMConfig:
    """SSIM stabilizers and window.

    ``window`` is ``"gaussian"`` (size×size weights with std ``sigma``) or
    ``"global"`` (one window spanning the whole image). ``c1``/``c2`` default
    to ``(0.01·MAX)²`` and ``(0.03·MAX)²``.
    """

    max_val: float = 255.0
    window: str = "gaussian"
    size: int = 11
    sigma: float = 1.5
    c1: float | None = None
    c2: float | None = None

    def __post_init__(self):
        if self.window not in ("gaussian", "global"):
            raise ValueError(f"unknown SSIM window {self.window!r}")
        if (self.c1 is not None and self.c1 <= 0) or (self.c2 is not None and self.c2 <= 0):
            raise ValueError("SSIM constants must be positive")

    @property
    def k1(self) -> float:
        return self.c1 if self.c1 is not None else (0.01 * self.max_val) ** 2

    @property
    def k2(self) -> float:
        return self.c2 if self.c2 is not None else (0.03 * self.max_val) ** 2


def to_gray(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] == 3:
        return a @ LUMA
    if a.ndim != 2:
        raise ValueError(f"expected H×W or H×W×3 image, got shape {a.shape}")
    return a


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y, cfg: SSIMConfig = SSIMConfig()) -> float:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    gx, gy = to_gray(x), to_gray(y)
    c1, c2 = cfg.k1, cfg.k2
    if cfg.window == "global":
        mx, my = gx.mean(), gy.mean()
        vx, vy = gx.var(), gy.var()
        cxy = ((gx - mx) * (gy - my)).mean()
        return float(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))

    k = cfg.size
    if min(gx.shape) < k:
        raise ValueError(f"image {gx.shape} smaller than the {k}×{k} window")
    w = gaussian_window(k, cfg.sigma)

    def filt(a):
        return np.tensordot(sliding_window_view(a, (k, k)), w, axes=([2, 3], [0, 1]))

    mx, my = filt(gx), filt(gy)
    vx = filt(gx * gx) - mx * mx
    vy = filt(gy * gy) - my * my
    cxy = filt(gx * gy) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(smap.mean())


def psnr(x, y, max_val: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))
