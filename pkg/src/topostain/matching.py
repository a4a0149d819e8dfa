"""Node importance via damped PageRank and correlation (Gram) matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import PatchGraph, build_adjacency
from .tensor import Tensor


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"PageRank did not converge after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PageRankConfig:
    alpha: float = 0.85
    tol: float = 1e-6
    max_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("damping must lie in (0, 1)")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class ImportanceScores:
    p: np.ndarray
    iterations: int
    residual: float

    def __len__(self) -> int:
        return self.p.size


def transition_matrix(g: PatchGraph | np.ndarray) -> np.ndarray:
    """Row-stochastic random-walk matrix ``D^{-1} A``."""
    a = g.adjacency if isinstance(g, PatchGraph) else np.asarray(g, dtype=np.float64)
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("transition matrix undefined for a zero-degree node")
    return a / deg[:, None]


def pagerank(P: np.ndarray, cfg: PageRankConfig = PageRankConfig()) -> ImportanceScores:
    """Power iteration ``p <- α Pᵀ p + (1-α)/N`` from the uniform vector."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    p = np.full(n, 1.0 / n)
    teleport = (1.0 - cfg.alpha) / n
    pt = P.T
    residual = np.inf
    for it in range(1, cfg.max_iter + 1):
        nxt = cfg.alpha * (pt @ p) + teleport
        residual = float(np.max(np.abs(nxt - p)))
        p = nxt
        if residual < cfg.tol:
            return ImportanceScores(p, it, residual)
    raise ConvergenceError(residual, cfg.max_iter)


def enhance_features(features, scores) -> Tensor:
    """Residual importance weighting: row i becomes ``F[i] * (1 + p[i])``."""
    f = T.as_tensor(features)
    p = scores.p if isinstance(scores, ImportanceScores) else np.asarray(scores, dtype=np.float64)
    if p.shape != (f.shape[0],):
        raise T.ShapeError(f"{p.size} scores for {f.shape[0]} nodes")
    return T.mul(f, T.Tensor(1.0 + p))


def node_importance(features, th: float, cfg: PageRankConfig = PageRankConfig()) -> ImportanceScores:
    return pagerank(transition_matrix(build_adjacency(features, th)), cfg)


def correlation_matching_loss(
    f_vihc,
    f_ihc,
    th: float,
    cfg: PageRankConfig = PageRankConfig(),
    norm: str = "fro",
    p_gen: ImportanceScores | None = None,
) -> Tensor:
    """Distance between importance-enhanced Gram matrices, divided by N².

    The real-IHC branch and the PageRank scores are constants; only
    ``f_vihc`` receives gradient. ``p_gen`` supplies precomputed scores for
    the generated side, e.g. to hold them fixed during finite differencing.
    """
    fv = T.as_tensor(f_vihc)
    fr = T.as_tensor(f_ihc).data
    if fv.shape != fr.shape:
        raise T.ShapeError(f"feature sets differ in shape: {fv.shape} vs {fr.shape}")
    n = fv.shape[0]
    if p_gen is None:
        p_gen = node_importance(fv.data, th, cfg)
    p_real = node_importance(fr, th, cfg)
    ev = enhance_features(fv, p_gen)
    er = fr * (1.0 + p_real.p)[:, None]
    c_real = er @ er.T
    diff = T.sub(T.matmul(ev, T.transpose(ev)), c_real)
    if norm == "fro":
        dist = T.frobenius_norm(diff)
    elif norm == "l1":
        dist = T.sum_(T.abs_(diff))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return T.mul(dist, 1.0 / (n * n))
