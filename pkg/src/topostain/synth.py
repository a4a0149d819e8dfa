"""Synthetic weakly-paired H&E / IHC image pairs.

Each pair shares a layout of elliptical "glands". The H&E rendering shows
every gland in purple tones; the IHC rendering stains a designated positive
subset brown and the rest blue, then shifts and rotates the whole image to
mimic adjacent-slice misalignment. The ground-truth mask follows the
unjittered layout.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND, NEGATIVE, POSITIVE = 0, 1, 2

HE_BACKGROUND = (242, 230, 240)
HE_NUCLEI = (90, 60, 140)
HE_NEGATIVE = (200, 120, 170)
IHC_BACKGROUND = (240, 238, 235)
IHC_POSITIVE = (150, 100, 50)
IHC_NEGATIVE = (70, 80, 160)

HE_PALETTE = np.array([HE_BACKGROUND, HE_NEGATIVE, HE_NUCLEI], dtype=np.uint8)
IHC_PALETTE = np.array([IHC_BACKGROUND, IHC_NEGATIVE, IHC_POSITIVE], dtype=np.uint8)

MANIFEST_HEADER = ["index", "tx", "ty", "rot_deg", "positive_fraction"]


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    structures: int = 8
    max_shift: float = 3.0
    max_rotation: float = 8.0
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("image size must be at least 8")
        if not 0.0 <= self.max_shift < self.size / 4:
            raise ValueError("translation jitter must be below size/4")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive fraction must lie in [0, 1]")


@dataclass
class SynthPair:
    he: np.ndarray
    ihc: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    tx: float
    ty: float
    rot_deg: float

    @property
    def positive_fraction(self) -> float:
        return float(self.mask.mean())


def _layout(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    labels = np.zeros((n, n), dtype=np.uint8)
    r_lo, r_hi = max(2.0, n / 16), max(3.0, n / 6)
    for _ in range(cfg.structures):
        cx, cy = rng.uniform(0, n, size=2)
        rx, ry = rng.uniform(r_lo, r_hi, size=2)
        theta = rng.uniform(0, np.pi)
        positive = rng.random() < cfg.positive_fraction
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        labels[inside] = POSITIVE if positive else NEGATIVE
    return labels


def jitter_labels(labels: np.ndarray, tx: float, ty: float, rot_deg: float) -> np.ndarray:
    """Rotate about the centre and translate, nearest-neighbour, background fill."""
    if tx == 0 and ty == 0 and rot_deg == 0:
        return labels.copy()
    n_y, n_x = labels.shape
    yy, xx = np.mgrid[0:n_y, 0:n_x].astype(np.float64)
    cy, cx = (n_y - 1) / 2, (n_x - 1) / 2
    a = np.deg2rad(rot_deg)
    c, s = np.cos(a), np.sin(a)
    # inverse map: output pixel -> source pixel
    dx, dy = xx - cx - tx, yy - cy - ty
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    ix, iy = np.rint(sx).astype(np.int64), np.rint(sy).astype(np.int64)
    valid = (ix >= 0) & (ix < n_x) & (iy >= 0) & (iy < n_y)
    out = np.zeros_like(labels)
    out[valid] = labels[iy[valid], ix[valid]]
    return out


def render(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    return palette[labels]


def generate_pair(cfg: SynthConfig, index: int) -> SynthPair:
    rng = np.random.default_rng([cfg.seed, index])
    labels = _layout(cfg, rng)
    tx, ty = (float(v) for v in rng.uniform(-cfg.max_shift, cfg.max_shift, size=2))
    rot = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    # quantize so the manifest reproduces the images exactly
    tx, ty, rot = round(tx, 4), round(ty, 4), round(rot, 4)
    jittered = jitter_labels(labels, tx, ty, rot)
    return SynthPair(
        he=render(labels, HE_PALETTE),
        ihc=render(jittered, IHC_PALETTE),
        mask=(labels == POSITIVE),
        labels=labels,
        tx=tx,
        ty=ty,
        rot_deg=rot,
    )


def save_png(path: Path, rgb: np.ndarray) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(rgb)).save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_png(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def generate_dataset(cfg: SynthConfig, count: int, out_dir: str | os.PathLike) -> Path:
    """Write ``count`` pairs as PNGs plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    manifest = out / "manifest.csv"
    rows = []
    for i in range(count):
        pair = generate_pair(cfg, i)
        save_png(out / f"he_{i:05d}.png", pair.he)
        save_png(out / f"ihc_{i:05d}.png", pair.ihc)
        save_png(out / f"mask_{i:05d}.png", np.repeat(pair.mask[..., None] * np.uint8(255), 3, axis=2))
        rows.append([i, f"{pair.tx:.4f}", f"{pair.ty:.4f}", f"{pair.rot_deg:.4f}", f"{pair.positive_fraction:.6f}"])
    try:
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {manifest}: {exc}") from exc
    return manifest


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "index": int(r["index"]),
                "tx": float(r["tx"]),
                "ty": float(r["ty"]),
                "rot_deg": float(r["rot_deg"]),
                "positive_fraction": float(r["positive_fraction"]),
            }
            for r in csv.DictReader(fh)
        ]


def load_dataset(directory: str | os.PathLike) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load ``(he, ihc)`` uint8 pairs listed in a dataset's manifest."""
    d = Path(directory)
    pairs = []
    for row in read_manifest(d / "manifest.csv"):
        i = row["index"]
        pairs.append((load_png(d / f"he_{i:05d}.png"), load_png(d / f"ihc_{i:05d}.png")))
    return pairs
