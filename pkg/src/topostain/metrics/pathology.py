"""Stain deconvolution, positive-area ratios and agreement statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HEMATOXYLIN = (0.650, 0.704, 0.286)
DAB = (0.269, 0.568, 0.777)
DEFAULT_DAB_THRESHOLD = 0.15


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class StainVectors:
    """Rows: hematoxylin, DAB, residual optical-density directions."""

    matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        m = self.matrix
        if m is None:
            h, d = _unit(HEMATOXYLIN), _unit(DAB)
            m = np.stack([h, d, _unit(np.cross(h, d))])
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("stain matrix must be 3×3")
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        if not np.isfinite(np.linalg.cond(m)) or np.linalg.cond(m) >= 1e6:
            raise ValueError("stain matrix is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_pair(cls, h, d) -> "StainVectors":
        h, d = _unit(h), _unit(d)
        return cls(np.stack([h, d, _unit(np.cross(h, d))]))


def optical_density(rgb) -> np.ndarray:
    px = np.asarray(rgb, dtype=np.float64)
    return -np.log10((px + 1.0) / 256.0)


def synthesize(concentrations, sv: StainVectors = StainVectors()) -> np.ndarray:
    """Inverse of deconvolution: H×W×3 stain concentrations to float RGB."""
    od = np.asarray(concentrations, dtype=np.float64) @ sv.matrix
    return 256.0 * 10.0 ** (-od) - 1.0


def stain_concentrations(rgb, sv: StainVectors = StainVectors()) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected an H×W×3 RGB image, got shape {rgb.shape}")
    return optical_density(rgb) @ np.linalg.inv(sv.matrix)


def stain_deconvolve(rgb, sv: StainVectors = StainVectors()) -> tuple[np.ndarray, np.ndarray]:
    """Return the (hematoxylin, DAB) concentration maps, clamped at zero."""
    c = np.clip(stain_concentrations(rgb, sv), 0.0, None)
    return c[..., 0], c[..., 1]


def otsu_threshold(values, bins: int = 256) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    hist, edges = np.histogram(v, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    m1 = np.divide(s0[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(centers[np.argmax(between)])


def positive_area_ratio(dab, threshold: float | str = DEFAULT_DAB_THRESHOLD) -> float:
    """Fraction of pixels whose DAB concentration exceeds ``threshold`` (or ``"otsu"``)."""
    d = np.asarray(dab, dtype=np.float64)
    if threshold == "otsu":
        threshold = otsu_threshold(d)
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    return float(np.mean(d > threshold))


def icc(a, b, variant: str = "2,1") -> float:
    """Intraclass correlation of two raters over the same subjects.

    ``"2,1"``: two-way random effects, absolute agreement, single measures.
    ``"3,1"``: two-way mixed, consistency. ``"1,1"``: one-way random.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two equal-length sequences, got {a.shape} and {b.shape}")
    n, k = a.size, 2
    if n < 3:
        raise ValueError("ICC needs at least three subjects")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        raise ValueError("ICC undefined when both sequences are constant")
    x = np.stack([a, b], axis=1)
    grand = x.mean()
    ss_rows = k * np.sum((x.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((x.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((x - grand) ** 2)
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    if variant == "2,1":
        return float((msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n))
    if variant == "3,1":
        return float((msr - mse) / (msr + (k - 1) * mse))
    if variant == "1,1":
        msw = (ss_cols + ss_err) / (n * (k - 1))
        return float((msr - msw) / (msr + (k - 1) * msw))
    raise ValueError(f"unknown ICC variant {variant!r}")


@dataclass(frozen=True)
class Trend:
    slope: float
    intercept: float

    @property
    def distance_to_ideal(self) -> float:
        return float(np.hypot(self.slope - 1.0, self.intercept))


def regression_trend(x, y) -> Trend:
    """Ordinary least-squares line ``y ≈ slope·x + intercept``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length sequences of at least two points")
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0:
        raise ValueError("regression undefined for constant x")
    slope = float(xc @ (y - y.mean()) / sxx)
    return Trend(slope, float(y.mean() - slope * x.mean()))
