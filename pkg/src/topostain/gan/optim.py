"""Adam with a linear learning-rate decay schedule."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor


def linear_decay_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Constant for the first half of training, then linear to 0 at ``epoch == epochs``."""
    start = epochs // 2
    if epoch <= start:
        return base_lr
    return base_lr * max(0.0, (epochs - epoch) / (epochs - start))


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name].copy()
            out[f"{prefix}.v.{name}"] = self.v[name].copy()
        return out

    def load_state(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        self.t = int(state[f"{prefix}.t"][0])
        for name in self.m:
            self.m[name] = np.array(state[f"{prefix}.m.{name}"])
            self.v[name] = np.array(state[f"{prefix}.v.{name}"])
