"""Finite-difference verification of every differentiable operation and loss.

Each check builds a scalar from a seeded random instance and compares its
analytic gradient against central differences on a random coordinate subset.
Loss-level checks run on a 16×16-input toy network; quantities the losses
treat as constants (sampled positions, edge masks, real-IHC features,
PageRank scores) are computed once and held fixed while differencing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .graph import GraphConvParams, PerturbationConfig, build_adjacency, normalize_adjacency, tagcn_forward
from .losses import info_nce_nodes, tacm_terms
from .matching import PageRankConfig, correlation_matching_loss, node_importance
from .tensor import Tensor

TOLERANCE = 1e-4
TOY_SIZE = 16


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    coords: int
    seconds: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


class _Ctx:
    def __init__(self, seed: int, coords: int):
        self.rng = np.random.default_rng(seed)
        self.coords = coords
        self.checked = 0

    def fd(self, f: Callable[[Tensor], Tensor], x: Tensor) -> float:
        k = min(self.coords, x.size)
        idx = self.rng.choice(x.size, size=k, replace=False)
        self.checked += k
        return T.finite_difference_check(f, x, coords=idx)

    def leaf(self, *shape, low=None, high=None) -> Tensor:
        if low is None:
            data = self.rng.normal(size=shape)
        else:
            data = self.rng.uniform(low, high, size=shape)
        return Tensor(data, requires_grad=True)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_(T.mul(y, Tensor(w)))


def _unary(fn, low=None, high=None):
    def check(c: _Ctx) -> float:
        x = c.leaf(4, 5, low=low, high=high)
        w = c.rng.normal(size=x.shape)
        return c.fd(lambda t: _weighted(fn(t), w), x)
    return check


def _binary(fn, low_b=None, high_b=None):
    def check(c: _Ctx) -> float:
        a = c.leaf(4, 5)
        b = c.leaf(4, 5, low=low_b, high=high_b)
        w = c.rng.normal(size=(4, 5))
        # the row-broadcast path: a length-4 vector against the 4×5 matrix
        v = c.leaf(4, low=low_b, high=high_b)
        return max(
            c.fd(lambda t: _weighted(fn(t, b), w), a),
            c.fd(lambda t: _weighted(fn(a, t), w), b),
            c.fd(lambda t: _weighted(fn(a, t), w), v),
        )
    return check


def _check_sum(c):
    x = c.leaf(3, 4, 5)
    w = c.rng.normal(size=(3, 5))
    return max(c.fd(lambda t: _weighted(T.sum_(t, axis=1), w), x), c.fd(lambda t: T.sum_(t), x))


def _check_mean(c):
    x = c.leaf(3, 4, 5)
    w = c.rng.normal(size=(3, 4, 1))
    return c.fd(lambda t: _weighted(T.mean(t, axis=-1, keepdims=True), w), x)


def _check_reshape(c):
    x = c.leaf(3, 4)
    w = c.rng.normal(size=(2, 6))
    return c.fd(lambda t: _weighted(T.reshape(t, (2, 6)), w), x)


def _check_transpose(c):
    x = c.leaf(2, 3, 4)
    w = c.rng.normal(size=(4, 2, 3))
    return c.fd(lambda t: _weighted(T.transpose(t, (2, 0, 1)), w), x)


def _check_take(c):
    x = c.leaf(6, 3)
    idx = [4, 0, 4, 2]
    w = c.rng.normal(size=(4, 3))
    return c.fd(lambda t: _weighted(T.take(t, idx, 0), w), x)


def _check_concat(c):
    a, b = c.leaf(2, 3), c.leaf(4, 3)
    w = c.rng.normal(size=(6, 3))
    return max(
        c.fd(lambda t: _weighted(T.concat([t, b], 0), w), a),
        c.fd(lambda t: _weighted(T.concat([a, t], 0), w), b),
    )


def _check_matmul(c):
    a, b = c.leaf(4, 3), c.leaf(3, 5)
    ba, bb = c.leaf(2, 4, 3), c.leaf(2, 3, 5)
    w, wb = c.rng.normal(size=(4, 5)), c.rng.normal(size=(2, 4, 5))
    return max(
        c.fd(lambda t: _weighted(T.matmul(t, b), w), a),
        c.fd(lambda t: _weighted(T.matmul(a, t), w), b),
        c.fd(lambda t: _weighted(T.matmul(t, bb), wb), ba),
        c.fd(lambda t: _weighted(T.matmul(ba, t), wb), bb),
    )


def _check_frobenius(c):
    x = c.leaf(4, 5)
    return c.fd(T.frobenius_norm, x)


def _check_l2rows(c):
    x = c.leaf(5, 4)
    w = c.rng.normal(size=x.shape)
    return c.fd(lambda t: _weighted(T.l2_normalize_rows(t), w), x)


def _check_xent(c):
    x = c.leaf(5, 6)
    target = np.array([0, 3, 5, 1, 1])
    return c.fd(lambda t: T.softmax_cross_entropy_rows(t, target), x)


def _check_conv2d(c):
    worst = 0.0
    for (b, ch, h, oc, stride, pad) in [(2, 3, 7, 4, 1, 1), (1, 2, 8, 3, 2, 1), (1, 2, 6, 2, 1, 0)]:
        x = c.leaf(b, ch, h, h)
        k = c.leaf(oc, ch, 3, 3)
        bias = c.leaf(oc)
        ho = (h + 2 * pad - 3) // stride + 1
        w = c.rng.normal(size=(b, oc, ho, ho))
        worst = max(
            worst,
            c.fd(lambda t: _weighted(T.conv2d(t, k, stride, pad, bias), w), x),
            c.fd(lambda t: _weighted(T.conv2d(x, t, stride, pad, bias), w), k),
            c.fd(lambda t: _weighted(T.conv2d(x, k, stride, pad, t), w), bias),
        )
    return worst


def _check_upsample(c):
    x = c.leaf(2, 3, 4)
    w = c.rng.normal(size=(2, 6, 8))
    return c.fd(lambda t: _weighted(T.upsample2x(t), w), x)


def _check_instance_norm(c):
    x = c.leaf(2, 3, 4, 4)
    w = c.rng.normal(size=x.shape)
    return c.fd(lambda t: _weighted(T.instance_norm(t), w), x)


def _check_tagcn(c):
    f = c.leaf(10, 6)
    a_hat = normalize_adjacency(build_adjacency(f.data, 0.0))
    worst = 0.0
    for mode in ("sum", "power"):
        params = GraphConvParams.init(6, 3, c.rng, mode)
        w = c.rng.normal(size=(10, 6))
        worst = max(worst, c.fd(lambda t: _weighted(tagcn_forward(a_hat, t, params), w), f))
        for wk in params.weights:
            worst = max(worst, c.fd(lambda t: _weighted(tagcn_forward(a_hat, f, params), w), wk))
    return worst


def _check_info_nce(c):
    s, g = c.leaf(8, 5), c.leaf(8, 5)
    return max(
        c.fd(lambda t: info_nce_nodes(t, g, 0.07, True), s),
        c.fd(lambda t: info_nce_nodes(s, t, 0.5, False), g),
    )


def _tacm_case(c: _Ctx, key: str) -> float:
    n, d = 16, 8
    f_he, f_v = c.leaf(n, d), c.leaf(n, d)
    gnn1 = GraphConvParams.init(d, 4, c.rng)
    gnn2 = GraphConvParams.init(d, 4, c.rng)
    pert = PerturbationConfig(0.15, int(c.rng.integers(1 << 31)))

    def f(_):
        return tacm_terms(f_he, f_v, gnn1, gnn2, 0.1, 0.07, pert)[key]

    worst = max(c.fd(f, f_he), c.fd(f, f_v))
    used = gnn1.weights if key == "awa" else gnn2.weights if key == "pert" else gnn1.weights + gnn2.weights
    for w in used:
        worst = max(worst, c.fd(f, w))
    return worst


def _check_cm(c):
    n, d = 16, 8
    f_v = c.leaf(n, d)
    f_r = c.rng.normal(size=(n, d))
    cfg = PageRankConfig()
    worst = 0.0
    for norm in ("fro", "l1"):
        frozen = node_importance(f_v.data, 0.1, cfg)
        worst = max(worst, c.fd(lambda t: correlation_matching_loss(t, f_r, 0.1, cfg, norm, frozen), f_v))
    return worst


class _Toy:
    """A 16×16 toy model with frozen per-step constants."""

    def __init__(self, c: _Ctx, **overrides):
        from .gan.objectives import build_models, real_features
        from .gan.train import TrainConfig

        self.cfg = TrainConfig(gen_channels=4, disc_channels=4, proj_dim=8, num_patches=12, seed=int(c.rng.integers(1000)), **overrides)
        self.models = build_models(self.cfg)
        # fan-in scaled weights keep activations O(1), so ReLU kinks sit far from
        # the differencing step more often than under the small training init
        for name, p in self.models.named_parameters():
            if p.ndim == 4:
                p.data = c.rng.normal(0.0, np.sqrt(2.0 / np.prod(p.shape[1:])), size=p.shape)
            elif name.startswith("H.") and ".w" in name:
                p.data = c.rng.normal(0.0, np.sqrt(1.0 / p.shape[0]), size=p.shape)
            elif name.startswith("H."):
                p.data = c.rng.normal(0.0, 0.1, size=p.shape)
        self.he = c.rng.uniform(-1, 1, size=(1, 3, TOY_SIZE, TOY_SIZE))
        self.ihc = c.rng.uniform(-1, 1, size=(1, 3, TOY_SIZE, TOY_SIZE))
        self.step = 3
        self.real = real_features(self.models, self.ihc, self.cfg, self.step)
        self.frozen: dict = {}

    def parts(self):
        from .gan.objectives import generator_losses

        parts, _ = generator_losses(
            self.models, self.he, self.ihc, self.cfg, self.step, real_feats=self.real, frozen=self.frozen
        )
        return parts

    def params(self, *names):
        named = dict(self.models.named_parameters())
        return [named[n] for n in names]


def _check_adv(c):
    from .gan.objectives import adversarial_loss, discriminator_loss

    lr, lf = c.leaf(2, 1, 3, 3), c.leaf(2, 1, 3, 3)
    worst = max(
        c.fd(lambda t: adversarial_loss(t, lf, "discriminator"), lr),
        c.fd(lambda t: adversarial_loss(lr, t, "discriminator"), lf),
        c.fd(lambda t: adversarial_loss(None, t, "generator"), lf),
    )
    toy = _Toy(c)
    fake = toy.models.gen(Tensor(toy.he))[0].data
    for p in toy.params("D.l1.w", "D.l2.w", "D.l3.b"):
        worst = max(worst, c.fd(lambda _: discriminator_loss(toy.models, fake, toy.ihc), p))
    for p in toy.params("G.out.w", "G.res1.conv2.w"):
        worst = max(worst, c.fd(lambda _: toy.parts()["adv"], p))
    return worst


def _check_patchnce(c):
    toy = _Toy(c, use_tacm=False, use_tcpm=False)
    worst = 0.0
    for p in toy.params("G.stem.w", "G.down2.w", "G.res0.conv1.w", "H.h1.w1", "H.h4.b2"):
        worst = max(worst, c.fd(lambda _: toy.parts()["patchnce"], p))
    return worst


def _check_total(c):
    from .gan.objectives import total_loss

    toy = _Toy(c)
    worst = 0.0
    names = ("G.stem.w", "G.down1.w", "G.up2.w", "G.out.b", "H.h2.w2", "GNN1.3.w1", "GNN2.0.w2")
    for p in toy.params(*names):
        worst = max(worst, c.fd(lambda _: total_loss(toy.parts(), toy.cfg), p))
    return worst


def _loss_part(key):
    def check(c):
        toy = _Toy(c)
        worst = 0.0
        for p in toy.params("G.stem.w", "G.down1.w", "H.h3.w1"):
            worst = max(worst, c.fd(lambda _: toy.parts()[key], p))
        return worst
    return check


CHECKS: dict[str, Callable[[_Ctx], float]] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, 0.5, 2.0),
    "neg": _unary(T.neg),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 3.0),
    "sqrt": _unary(T.sqrt, 0.2, 3.0),
    "relu": _unary(T.relu),
    "leaky_relu": _unary(T.leaky_relu),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "softplus": _unary(T.softplus),
    "abs": _unary(T.abs_),
    "sum": _check_sum,
    "mean": _check_mean,
    "reshape": _check_reshape,
    "transpose": _check_transpose,
    "take": _check_take,
    "concat": _check_concat,
    "matmul": _check_matmul,
    "frobenius_norm": _check_frobenius,
    "l2_normalize_rows": _check_l2rows,
    "softmax_cross_entropy": _check_xent,
    "conv2d": _check_conv2d,
    "upsample2x": _check_upsample,
    "instance_norm": _check_instance_norm,
    "tagcn": _check_tagcn,
    "info_nce": _check_info_nce,
    "awa": lambda c: _tacm_case(c, "awa"),
    "pert": lambda c: _tacm_case(c, "pert"),
    "struc": lambda c: max(_tacm_case(c, "struc"), _loss_part("struc")(c)),
    "cm": lambda c: max(_check_cm(c), _loss_part("cm")(c)),
    "adv": _check_adv,
    "patchnce": _check_patchnce,
    "total": _check_total,
}

LOSS_CHECKS = ("awa", "pert", "struc", "cm", "adv", "patchnce", "total")


def run_suite(only=None, seed: int = 0, coords: int = 8, tol: float = TOLERANCE) -> list[CheckResult]:
    """Run the named checks (all by default) in declaration order."""
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}")
    results = []
    for name in names:
        # per-check seed so --only reproduces the same instance as the full run
        ctx = _Ctx(int(np.random.SeedSequence([seed, list(CHECKS).index(name)]).generate_state(1)[0]), coords)
        t0 = time.perf_counter()
        err = CHECKS[name](ctx)
        results.append(CheckResult(name, float(err), ctx.checked, time.perf_counter() - t0, tol))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<24}{'max_rel_err':>14}{'coords':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<24}{r.max_rel_err:>14.3e}{r.coords:>8}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
