from .distribution import GaussianStats, frechet_distance, gaussian_stats, kid, read_tagf, write_tagf
from .pathology import (
    StainVectors,
    Trend,
    icc,
    otsu_threshold,
    positive_area_ratio,
    regression_trend,
    stain_deconvolve,
    synthesize,
)
from .quality import SSIMConfig, psnr, ssim
from .report import MetricReport

__all__ = [
    "GaussianStats",
    "MetricReport",
    "SSIMConfig",
    "StainVectors",
    "Trend",
    "frechet_distance",
    "gaussian_stats",
    "icc",
    "kid",
    "otsu_threshold",
    "positive_area_ratio",
    "psnr",
    "read_tagf",
    "regression_trend",
    "ssim",
    "stain_deconvolve",
    "synthesize",
    "write_tagf",
]
