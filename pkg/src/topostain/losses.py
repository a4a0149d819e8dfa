"""Contrastive structural-consistency losses over patch-node features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graph import (
    GraphConvParams,
    PatchGraph,
    PerturbationConfig,
    build_adjacency,
    mask_edges,
    normalize_adjacency,
    tagcn_forward,
)
from .tensor import Tensor

DEFAULT_TAP_LAYERS = (0, 4, 8, 12, 16)
DEFAULT_THRESHOLDS = (0.5, 0.5, 0.1, 0.1, 0.1)


class DegenerateContrastError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    num_patches: int = 256
    tap_layers: tuple[int, ...] = DEFAULT_TAP_LAYERS
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    normalize: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.num_patches < 2:
            raise ValueError("need at least two patches per layer")
        if len(self.tap_layers) != len(self.thresholds):
            raise ValueError(
                f"{len(self.tap_layers)} tap layers but {len(self.thresholds)} thresholds"
            )


def info_nce_nodes(s, g, tau: float = 0.07, normalize: bool = False) -> Tensor:
    """InfoNCE over matched rows: row i of ``s`` is the anchor, row i of ``g`` its positive."""
    s, g = T.as_tensor(s), T.as_tensor(g)
    if s.shape != g.shape or s.ndim != 2:
        raise T.ShapeError(f"node sets must share an N×D shape, got {s.shape} and {g.shape}")
    n = s.shape[0]
    if n < 2:
        raise DegenerateContrastError("InfoNCE needs at least two nodes")
    if normalize:
        s, g = T.l2_normalize_rows(s), T.l2_normalize_rows(g)
    logits = T.mul(T.matmul(s, T.transpose(g)), 1.0 / tau)
    return T.softmax_cross_entropy_rows(logits, np.arange(n))


def _aggregate(graph: PatchGraph, params: GraphConvParams) -> Tensor:
    return tagcn_forward(normalize_adjacency(graph), graph.features, params)


def _mask_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def tacm_terms(
    f_he,
    f_vihc,
    gnn1: GraphConvParams,
    gnn2: GraphConvParams,
    th: float,
    tau: float = 0.07,
    pert: PerturbationConfig = PerturbationConfig(),
    normalize: bool = True,
    use_pert: bool = True,
    mask_fn: Callable[[PatchGraph, PerturbationConfig], PatchGraph] = mask_edges,
    adjacency: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """Return ``awa``, ``pert`` and ``struc`` for one feature scale.

    Both branches see the H&E topology: the aware branch aggregates each
    image over its own graph with the shared ``gnn1``; the perturbation branch
    aggregates both images over two independently edge-masked copies of the
    H&E graph with ``gnn2``. ``adjacency`` overrides the thresholded
    ``(H&E, generated)`` adjacencies, which carry no gradient either way.
    """
    f_he, f_vihc = T.as_tensor(f_he), T.as_tensor(f_vihc)
    if adjacency is None:
        g_he, g_vihc = build_adjacency(f_he, th), build_adjacency(f_vihc, th)
    else:
        g_he, g_vihc = PatchGraph(f_he, adjacency[0]), PatchGraph(f_vihc, adjacency[1])
    s = _aggregate(g_he, gnn1)
    g = _aggregate(g_vihc, gnn1)
    awa = info_nce_nodes(s, g, tau, normalize)
    if not use_pert:
        return {"awa": awa, "pert": None, "struc": awa}

    seed_he, seed_vihc = _mask_seeds(pert.seed)
    a_he = mask_fn(g_he, PerturbationConfig(pert.mask_ratio, seed_he))
    a_vihc = mask_fn(g_he, PerturbationConfig(pert.mask_ratio, seed_vihc))
    sp = tagcn_forward(normalize_adjacency(a_he), f_he, gnn2)
    gp = tagcn_forward(normalize_adjacency(a_vihc), f_vihc, gnn2)
    lp = info_nce_nodes(sp, gp, tau, normalize)
    struc = T.mul(T.add(awa, lp), 0.5)
    return {"awa": awa, "pert": lp, "struc": struc}


def tacm_loss(f_he, f_vihc, gnn1, gnn2, th, tau=0.07, pert=PerturbationConfig(), **kw) -> Tensor:
    """Structural consistency loss ``(L_awa + L_pert) / 2`` for one scale."""
    return tacm_terms(f_he, f_vihc, gnn1, gnn2, th, tau, pert, **kw)["struc"]


def patch_nce(
    feats_in: Sequence,
    feats_out: Sequence,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> Tensor:
    """Multi-layer PatchNCE averaged over layers.

    Output-image patches are anchors; the input patch at the same location is
    the positive and every other sampled location of the input is a negative.
    """
    if len(feats_in) != len(feats_out) or not feats_in:
        raise ValueError("need matching, non-empty per-layer feature lists")
    total = None
    for fin, fout in zip(feats_in, feats_out):
        if T.as_tensor(fin).shape[0] < 2:
            raise DegenerateContrastError("PatchNCE needs at least two locations per layer")
        term = info_nce_nodes(fout, fin, cfg.tau, cfg.normalize)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / len(feats_in))
