"""Adversarial, contrastive and total objectives wired over the toy networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..graph import GraphConvParams, PerturbationConfig, build_adjacency
from ..losses import info_nce_nodes, tacm_terms
from ..matching import PageRankConfig, correlation_matching_loss, node_importance
from ..tensor import Tensor
from .nets import Discriminator, Generator, ProjectionHeads

PARTS = ("adv", "patchnce", "struc", "cm")


def sample_patch_features(tap, count: int, seed: int | np.random.Generator):
    """Sample ``count`` spatial positions of a C×H×W map without replacement.

    Returns the ``count×C`` feature rows and the flat position indices, so the
    same positions can be read from a paired image's map.
    """
    tap = T.as_tensor(tap)
    if tap.ndim == 4 and tap.shape[0] == 1:
        tap = T.reshape(tap, tap.shape[1:])
    if tap.ndim != 3:
        raise T.ShapeError(f"expected a C×H×W map, got {tap.shape}")
    c, h, w = tap.shape
    if count > h * w:
        raise ValueError(f"cannot sample {count} of {h * w} positions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.permutation(h * w)[:count]
    return gather_positions(tap, idx), idx


def gather_positions(tap, idx) -> Tensor:
    tap = T.as_tensor(tap)
    c = tap.shape[0]
    flat = T.transpose(T.reshape(tap, (c, -1)))
    return T.take(flat, idx, axis=0)


def adversarial_loss(d_real, d_fake, side: str) -> Tensor:
    """Logistic GAN loss on discriminator logits.

    ``"discriminator"``: −log σ(real) − log(1 − σ(fake)).
    ``"generator"``: the non-saturating −log σ(fake); ``d_real`` is ignored.
    """
    if side == "discriminator":
        return T.add(T.mean(T.softplus(T.neg(d_real))), T.mean(T.softplus(d_fake)))
    if side == "generator":
        return T.mean(T.softplus(T.neg(d_fake)))
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def total_loss(parts: dict, cfg) -> Tensor:
    """``adv + patchnce + λ1·struc + λ2·cm`` with ablation flags applied."""
    out = T.add(parts["adv"], parts["patchnce"])
    if cfg.use_tacm and parts.get("struc") is not None:
        out = T.add(out, T.mul(parts["struc"], cfg.lambda1))
    if cfg.use_tcpm and parts.get("cm") is not None:
        out = T.add(out, T.mul(parts["cm"], cfg.lambda2))
    return out


@dataclass
class Models:
    gen: Generator
    disc: Discriminator
    heads: ProjectionHeads
    gnn1: list[GraphConvParams]
    gnn2: list[GraphConvParams]

    def generator_side(self) -> list[tuple[str, Tensor]]:
        named = [(f"G.{k}", v) for k, v in self.gen.named_parameters()]
        named += [(f"H.{k}", v) for k, v in self.heads.named_parameters()]
        for tag, gnns in (("GNN1", self.gnn1), ("GNN2", self.gnn2)):
            for layer, g in enumerate(gnns):
                named += [(f"{tag}.{layer}.w{k}", w) for k, w in enumerate(g.weights)]
        return named

    def discriminator_side(self) -> list[tuple[str, Tensor]]:
        return [(f"D.{k}", v) for k, v in self.disc.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.generator_side() + self.discriminator_side()


def build_models(cfg) -> Models:
    gen = Generator(cfg.gen_channels, seed=cfg.seed)
    disc = Discriminator(cfg.disc_channels, seed=cfg.seed + 1)
    heads = ProjectionHeads(gen.tap_channels, cfg.proj_dim, seed=cfg.seed + 2)
    rng = np.random.default_rng([cfg.seed, 3])
    gnn1 = [GraphConvParams.init(cfg.proj_dim, cfg.hops, rng, cfg.gnn_mode) for _ in gen.tap_channels]
    gnn2 = [GraphConvParams.init(cfg.proj_dim, cfg.hops, rng, cfg.gnn_mode) for _ in gen.tap_channels]
    return Models(gen, disc, heads, gnn1, gnn2)


def step_seed(cfg, step: int, image: int, layer: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, step, image, layer]).generate_state(1)[0])


def real_features(models: Models, ihc: np.ndarray, cfg, step: int) -> list[list[np.ndarray]]:
    """Projected real-IHC node features per image and layer; gradient-free."""
    out = []
    with T.no_grad():
        taps = models.gen.encode(Tensor(ihc))
        for b in range(ihc.shape[0]):
            per_layer = []
            for l, tap in enumerate(taps):
                idx = _positions(cfg, tap, step, b, l)
                per_layer.append(models.heads(l, gather_positions(tap.data[b], idx)).data)
            out.append(per_layer)
    return out


def _positions(cfg, tap, step, b, layer):
    _, _, h, w = tap.shape
    count = min(cfg.num_patches, h * w)
    return np.random.default_rng(step_seed(cfg, step, b, layer)).permutation(h * w)[:count]


def generator_losses(
    models: Models,
    he: np.ndarray,
    ihc: np.ndarray,
    cfg,
    step: int,
    real_feats: list[list[np.ndarray]] | None = None,
    forward: tuple[Tensor, list[Tensor]] | None = None,
    frozen: dict | None = None,
) -> tuple[dict[str, Tensor | None], Tensor]:
    """All generator-side loss terms for a B×3×H×W batch; returns ``(parts, fake)``.

    Node positions, edge masks and the real-IHC features are determined by
    ``step`` so a step can be replayed exactly. ``forward`` reuses an
    already recorded generator pass ``(fake, taps)`` of ``he``. A dict passed
    as ``frozen`` memoizes the non-differentiable pieces (thresholded
    adjacencies and generated-side PageRank scores) per image and layer;
    reusing it holds them fixed across calls.
    """
    fake, taps_in = forward if forward is not None else models.gen(Tensor(he))
    taps_out = models.gen.encode(fake)
    if real_feats is None and cfg.use_tcpm:
        real_feats = real_features(models, ihc, cfg, step)
    adv = adversarial_loss(None, models.disc(fake), "generator")

    nce_terms, struc_terms, cm_terms = [], [], []
    batch = he.shape[0]
    for b in range(batch):
        for l in range(len(taps_in)):
            idx = _positions(cfg, taps_in[l], step, b, l)
            tin = T.reshape(T.take(taps_in[l], [b], 0), taps_in[l].shape[1:])
            tout = T.reshape(T.take(taps_out[l], [b], 0), taps_out[l].shape[1:])
            f_in = models.heads(l, gather_positions(tin, idx))
            f_out = models.heads(l, gather_positions(tout, idx))
            nce_terms.append(info_nce_nodes(f_out, f_in, cfg.tau, cfg.normalize_nodes))
            if cfg.use_tacm:
                adj = None
                if frozen is not None:
                    key = ("adjacency", b, l)
                    if key not in frozen:
                        th = cfg.thresholds[l]
                        frozen[key] = (build_adjacency(f_in.data, th).adjacency, build_adjacency(f_out.data, th).adjacency)
                    adj = frozen[key]
                terms = tacm_terms(
                    f_in,
                    f_out,
                    models.gnn1[l],
                    models.gnn2[l],
                    cfg.thresholds[l],
                    cfg.tau,
                    PerturbationConfig(cfg.mask_ratio, step_seed(cfg, step, b, l)),
                    normalize=cfg.normalize_nodes,
                    use_pert=cfg.use_pert,
                    adjacency=adj,
                )
                struc_terms.append(terms["struc"])
            if cfg.use_tcpm:
                pr = PageRankConfig(cfg.pagerank_alpha, cfg.pagerank_tol, cfg.pagerank_max_iter)
                scores = None
                if frozen is not None:
                    key = ("importance", b, l)
                    if key not in frozen:
                        frozen[key] = node_importance(f_out.data, cfg.thresholds[l], pr)
                    scores = frozen[key]
                cm_terms.append(
                    correlation_matching_loss(f_out, real_feats[b][l], cfg.thresholds[l], pr, cfg.cm_norm, scores)
                )
    parts = {
        "adv": adv,
        "patchnce": _average(nce_terms),
        "struc": _average(struc_terms),
        "cm": _average(cm_terms),
    }
    return parts, fake


def discriminator_loss(models: Models, fake: np.ndarray, ihc: np.ndarray) -> Tensor:
    return adversarial_loss(models.disc(Tensor(ihc)), models.disc(Tensor(fake)), "discriminator")


def _average(terms: list[Tensor]) -> Tensor | None:
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(terms))
