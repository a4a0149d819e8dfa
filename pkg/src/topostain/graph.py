"""Patch graphs over node features and topology-adaptive aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGraph:
    """Node features together with a symmetric 0/1 adjacency matrix."""

    features: Tensor
    adjacency: np.ndarray
    degree: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "degree", self.adjacency.sum(axis=1).astype(np.int64))

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def with_adjacency(self, adjacency: np.ndarray) -> "PatchGraph":
        return PatchGraph(self.features, adjacency)


@dataclass(frozen=True)
class PerturbationConfig:
    mask_ratio: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.mask_ratio}")


@dataclass
class GraphConvParams:
    """Per-hop weights of a polynomial graph filter.

    ``mode="sum"`` holds ``W_0 .. W_n`` and evaluates ``Σ_k Â^k F W_k``;
    ``mode="power"`` holds a single weight and evaluates ``Â^n F W``.
    """

    weights: list[Tensor]
    mode: str = "sum"
    power_hops: int = 0

    def __post_init__(self):
        if self.mode not in ("sum", "power"):
            raise ValueError(f"unknown graph-conv mode {self.mode!r}")
        if not self.weights:
            raise ValueError("need at least one weight matrix")
        if self.mode == "power" and len(self.weights) != 1:
            raise ValueError("power mode takes exactly one weight matrix")

    @property
    def hops(self) -> int:
        return len(self.weights) - 1 if self.mode == "sum" else self.power_hops

    @classmethod
    def init(cls, dim: int, hops: int, rng: np.random.Generator, mode: str = "sum") -> "GraphConvParams":
        if hops < 0:
            raise ValueError("hop count must be nonnegative")
        bound = np.sqrt(6.0 / (dim + dim))
        count = hops + 1 if mode == "sum" else 1
        ws = [Tensor(rng.uniform(-bound, bound, size=(dim, dim)), requires_grad=True) for _ in range(count)]
        return cls(ws, mode, hops if mode == "power" else 0)

    def parameters(self) -> list[Tensor]:
        return list(self.weights)


def cosine_similarity(f: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("feature row with zero norm")
    u = f / norms[:, None]
    return u @ u.T


def build_adjacency(features, th: float) -> PatchGraph:
    """Connect nodes whose feature cosine similarity is at least ``th``."""
    feats = T.as_tensor(features)
    f = feats.data
    if f.ndim != 2 or f.shape[0] < 2:
        raise DegenerateInputError(f"need an N×D feature set with N >= 2, got {f.shape}")
    cos = cosine_similarity(f)
    # symmetrize against round-off so that A == A.T exactly
    cos = 0.5 * (cos + cos.T)
    np.fill_diagonal(cos, 1.0)
    adj = (cos >= th).astype(np.float64)
    return PatchGraph(feats, adj)


def normalize_adjacency(g: PatchGraph | np.ndarray) -> np.ndarray:
    """Symmetric normalization ``D^{-1/2} A D^{-1/2}``."""
    a = g.adjacency if isinstance(g, PatchGraph) else np.asarray(g, dtype=np.float64)
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("cannot normalize a graph with a zero-degree node")
    s = 1.0 / np.sqrt(deg)
    return a * s[:, None] * s[None, :]


def mask_edges(g: PatchGraph, cfg: PerturbationConfig) -> PatchGraph:
    """Drop each off-diagonal edge independently with probability ``mask_ratio``.

    The upper triangle is sampled and mirrored; self-loops always survive.
    """
    a = g.adjacency
    n = a.shape[0]
    rng = np.random.default_rng(cfg.seed)
    iu = np.triu_indices(n, k=1)
    keep = rng.random(iu[0].size) >= cfg.mask_ratio
    upper = np.zeros_like(a)
    upper[iu] = a[iu] * keep
    out = upper + upper.T
    out[np.diag_indices(n)] = np.diag(a)
    return g.with_adjacency(out)


def tagcn_forward(a_hat, features, params: GraphConvParams) -> Tensor:
    """Polynomial graph filter over the normalized adjacency."""
    f = T.as_tensor(features)
    a = T.as_tensor(a_hat)
    n = a.shape[0]
    if a.shape != (n, n) or f.ndim != 2 or f.shape[0] != n:
        raise T.ShapeError(f"adjacency {a.shape} does not match features {f.shape}")
    d = f.shape[1]
    for w in params.weights:
        if w.shape[0] != d:
            raise T.ShapeError(f"weight {w.shape} does not accept {d}-dim features")
    if params.mode == "power":
        h = f
        for _ in range(params.hops):
            h = T.matmul(a, h)
        return T.matmul(h, params.weights[0])
    out = T.matmul(f, params.weights[0])
    h = f
    for w in params.weights[1:]:
        h = T.matmul(a, h)
        out = T.add(out, T.matmul(h, w))
    return out


def degree_histogram(g: PatchGraph) -> list[tuple[int, int]]:
    values, counts = np.unique(g.degree, return_counts=True)
    return [(int(v), int(c)) for v, c in zip(values, counts)]


def adjacency_grid(g: PatchGraph) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in g.adjacency)
