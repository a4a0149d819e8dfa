"""Training loop for the toy virtual-staining GAN."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..losses import DEFAULT_THRESHOLDS
from ..metrics.distribution import frechet_distance, gaussian_stats, kid
from ..synth import save_png
from .checkpoint import read_checkpoint, write_checkpoint
from .nets import Generator, Net, image_to_tensor, tensor_to_image
from .objectives import Models, build_models, discriminator_loss, generator_losses, total_loss
from .optim import Adam, linear_decay_lr

log = logging.getLogger(__name__)

LOSS_HEADER = ["epoch", "step", "adv_d", "adv_g", "patchnce", "struc", "cm", "total", "lr"]


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 1.0
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    mask_ratio: float = 0.15
    hops: int = 4
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    tau: float = 0.07
    num_patches: int = 64
    use_tacm: bool = True
    use_tcpm: bool = True
    use_pert: bool = True
    gen_channels: int = 8
    disc_channels: int = 8
    proj_dim: int = 32
    beta1: float = 0.5
    beta2: float = 0.999
    gnn_mode: str = "sum"
    normalize_nodes: bool = True
    cm_norm: str = "fro"
    pagerank_alpha: float = 0.85
    pagerank_tol: float = 1e-6
    pagerank_max_iter: int = 100
    checkpoint_every: int = 10
    sample_every: int = 10
    sample_count: int = 4

    def __post_init__(self):
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("learning rate and temperature must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if len(self.thresholds) != Generator.num_taps:
            raise ValueError(f"need {Generator.num_taps} thresholds, got {len(self.thresholds)}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask ratio must lie in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class RunArtifacts:
    models: Models
    losses: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    loss_csv: Path | None = None


def stack_images(images) -> np.ndarray:
    return np.stack([image_to_tensor(im) for im in images])


def model_state(models: Models, opt_g: Adam | None = None, opt_d: Adam | None = None) -> dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in models.named_parameters()}
    if opt_g is not None:
        state.update(opt_g.state("opt.G"))
    if opt_d is not None:
        state.update(opt_d.state("opt.D"))
    return state


def load_model_state(models: Models, state: dict[str, np.ndarray]) -> None:
    for name, p in models.named_parameters():
        if name not in state:
            raise KeyError(f"checkpoint lacks parameter {name}")
        if state[name].shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
        p.data = np.array(state[name])


def load_models(path: str | os.PathLike, cfg: TrainConfig) -> Models:
    models = build_models(cfg)
    load_model_state(models, read_checkpoint(path))
    return models


def _fmt(v) -> str:
    return "0" if v is None else repr(float(v))


def train(pairs, cfg: TrainConfig, out_dir: str | os.PathLike | None = None) -> RunArtifacts:
    """Alternate discriminator and generator updates over weakly-paired data.

    ``pairs`` is a sequence of ``(he, ihc)`` uint8 H×W×3 images. With
    ``out_dir`` set, per-epoch loss rows, checkpoints and sample grids are
    written there.
    """
    he_all = stack_images([p[0] for p in pairs])
    ihc_all = stack_images([p[1] for p in pairs])
    n = he_all.shape[0]
    models = build_models(cfg)
    opt_g = Adam(models.generator_side(), cfg.lr, (cfg.beta1, cfg.beta2))
    opt_d = Adam(models.discriminator_side(), cfg.lr, (cfg.beta1, cfg.beta2))
    out = Path(out_dir) if out_dir is not None else None
    run = RunArtifacts(models)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        run.loss_csv = out / "losses.csv"
        with open(run.loss_csv, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOSS_HEADER)

    step = 0
    for epoch in range(cfg.epochs):
        lr = linear_decay_lr(cfg.lr, epoch, cfg.epochs)
        opt_g.lr = opt_d.lr = lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_rows = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            he, ihc = he_all[idx], ihc_all[idx]
            row = train_step(models, opt_g, opt_d, he, ihc, cfg, step)
            row = {"epoch": epoch, "step": step, **row, "lr": lr}
            if not all(math.isfinite(v) for k, v in row.items() if isinstance(v, float)):
                snap = None
                if out is not None:
                    snap = out / "diverged.tagw"
                    write_checkpoint(snap, model_state(models, opt_g, opt_d))
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}: {row}", snap)
            epoch_rows.append(row)
            step += 1
        run.losses.extend(epoch_rows)
        log.info("epoch %d  total %.4f", epoch, np.mean([r["total"] for r in epoch_rows]))
        if out is not None:
            with open(run.loss_csv, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in epoch_rows:
                    w.writerow([r["epoch"], r["step"]] + [_fmt(r[k]) for k in LOSS_HEADER[2:]])
            last = epoch == cfg.epochs - 1
            if last or (epoch + 1) % cfg.checkpoint_every == 0:
                path = out / f"ckpt_epoch{epoch + 1:03d}.tagw"
                write_checkpoint(path, model_state(models, opt_g, opt_d))
                run.checkpoints.append(path)
            if last or (epoch + 1) % cfg.sample_every == 0:
                save_png(out / f"samples_epoch{epoch + 1:03d}.png", sample_grid(models, he_all, ihc_all, cfg.sample_count))
    return run


def train_step(models: Models, opt_g: Adam, opt_d: Adam, he, ihc, cfg: TrainConfig, step: int) -> dict:
    with T.Tape():
        fake, taps_in = models.gen(T.Tensor(he))
        with T.Tape():
            opt_d.zero_grad()
            loss_d = discriminator_loss(models, fake.data, ihc)
            T.backward(loss_d)
            opt_d.step()
        opt_g.zero_grad()
        parts, _ = generator_losses(models, he, ihc, cfg, step, forward=(fake, taps_in))
        total = total_loss(parts, cfg)
        T.backward(total)
        models.disc.zero_grad()
        opt_g.step()
    return {
        "adv_d": float(loss_d.data),
        "adv_g": float(parts["adv"].data),
        "patchnce": float(parts["patchnce"].data),
        "struc": float(parts["struc"].data) if parts["struc"] is not None and cfg.use_tacm else 0.0,
        "cm": float(parts["cm"].data) if parts["cm"] is not None and cfg.use_tcpm else 0.0,
        "total": float(total.data),
    }


def translate(models: Models, images, batch: int = 16) -> list[np.ndarray]:
    x = stack_images(images)
    out = []
    with T.no_grad():
        for s in range(0, x.shape[0], batch):
            y, _ = models.gen(T.Tensor(x[s:s + batch]))
            out.extend(tensor_to_image(v) for v in y.data)
    return out


def sample_grid(models: Models, he_all, ihc_all, count: int) -> np.ndarray:
    k = min(count, he_all.shape[0])
    with T.no_grad():
        fake, _ = models.gen(T.Tensor(he_all[:k]))
    rows = [
        np.concatenate([tensor_to_image(he_all[i]), tensor_to_image(fake.data[i]), tensor_to_image(ihc_all[i])], axis=1)
        for i in range(k)
    ]
    return np.concatenate(rows, axis=0)


class FeatureExtractor(Net):
    """Frozen, randomly initialised copy of the generator encoder without normalization.

    Features are the spatial mean and standard deviation of the deepest tap,
    giving a fixed embedding for Fréchet-proxy and KID evaluation.
    """

    def __init__(self, channels: int = 8, seed: int = 1234):
        super().__init__()
        self.encoder = Generator(channels, seed=seed, norm=False)
        rng = np.random.default_rng(seed)
        for name, p in self.encoder.named_parameters():
            if name.endswith(".w"):
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape)
            p.requires_grad = False
        self.params = self.encoder.params

    def __call__(self, images, batch: int = 32) -> np.ndarray:
        x = stack_images(images)
        feats = []
        with T.no_grad():
            for s in range(0, x.shape[0], batch):
                deep = self.encoder.encode(T.Tensor(x[s:s + batch]))[-1].data
                feats.append(np.concatenate([deep.mean(axis=(2, 3)), deep.std(axis=(2, 3))], axis=1))
        return np.concatenate(feats, axis=0)


def frechet_proxy(generated, real, extractor: FeatureExtractor | None = None) -> dict[str, float]:
    ext = extractor or FeatureExtractor()
    fg, fr = ext(generated), ext(real)
    return {
        "frechet_proxy": frechet_distance(gaussian_stats(fr), gaussian_stats(fg)),
        "kid_x1e3": 1e3 * kid(fr, fg),
    }
