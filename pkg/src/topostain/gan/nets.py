"""Toy generator, patch discriminator and projection heads."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

DOWNSAMPLE = 4


class Net:
    """Named parameter container."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != v.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)


def _conv_w(rng, out_c, in_c, k=3, gain=0.02):
    return rng.normal(0.0, gain, size=(out_c, in_c, k, k))


class Generator(Net):
    """stem → 2 stride-2 convs → 2 residual blocks → 2 upsampling convs → tanh.

    Encoder taps, in order: the input image, the stem output, both
    downsampling outputs and the first residual block output.
    """

    num_taps = 5

    def __init__(self, channels: int = 8, res_blocks: int = 2, seed: int = 0, norm: bool = True):
        super().__init__()
        if res_blocks < 1:
            raise ValueError("need at least one residual block for the last tap")
        rng = np.random.default_rng(seed)
        c = channels
        self.channels = c
        self.norm = norm
        self.res_blocks = res_blocks
        self._param("stem.w", _conv_w(rng, c, 3))
        self._param("down1.w", _conv_w(rng, 2 * c, c))
        self._param("down2.w", _conv_w(rng, 4 * c, 2 * c))
        for i in range(res_blocks):
            self._param(f"res{i}.conv1.w", _conv_w(rng, 4 * c, 4 * c))
            self._param(f"res{i}.conv2.w", _conv_w(rng, 4 * c, 4 * c))
        self._param("up1.w", _conv_w(rng, 2 * c, 4 * c))
        self._param("up2.w", _conv_w(rng, c, 2 * c))
        self._param("out.w", _conv_w(rng, 3, c))
        self._param("out.b", np.zeros(3))

    @property
    def tap_channels(self) -> list[int]:
        c = self.channels
        return [3, c, 2 * c, 4 * c, 4 * c]

    def _block(self, x, name, stride=1, act=True):
        y = T.conv2d(x, self.params[name], stride=stride, pad=1)
        if self.norm:
            y = T.instance_norm(y)
        return T.relu(y) if act else y

    def _res(self, x, i):
        h = self._block(x, f"res{i}.conv1.w")
        h = self._block(h, f"res{i}.conv2.w", act=False)
        return T.add(x, h)

    def _check(self, x: Tensor) -> None:
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise T.ShapeError(f"spatial size {h}×{w} is not divisible by {DOWNSAMPLE}")

    def encode(self, x) -> list[Tensor]:
        """Encoder taps for a B×3×H×W (or 3×H×W) image."""
        x = T.as_tensor(x)
        self._check(x)
        taps = [x]
        h = self._block(x, "stem.w")
        taps.append(h)
        h = self._block(h, "down1.w", stride=2)
        taps.append(h)
        h = self._block(h, "down2.w", stride=2)
        taps.append(h)
        h = self._res(h, 0)
        taps.append(h)
        return taps

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        taps = self.encode(x)
        h = taps[-1]
        for i in range(1, self.res_blocks):
            h = self._res(h, i)
        h = self._block(T.upsample2x(h), "up1.w")
        h = self._block(T.upsample2x(h), "up2.w")
        y = T.conv2d(h, self.params["out.w"], pad=1, bias=self.params["out.b"])
        return T.tanh(y), taps

    __call__ = forward


class Discriminator(Net):
    """Three-layer patch classifier producing a logit map at 1/4 resolution."""

    def __init__(self, channels: int = 8, seed: int = 1):
        super().__init__()
        rng = np.random.default_rng(seed)
        c = channels
        self._param("l1.w", _conv_w(rng, c, 3))
        self._param("l1.b", np.zeros(c))
        self._param("l2.w", _conv_w(rng, 2 * c, c))
        self._param("l3.w", _conv_w(rng, 1, 2 * c))
        self._param("l3.b", np.zeros(1))

    def forward(self, x) -> Tensor:
        p = self.params
        h = T.leaky_relu(T.conv2d(x, p["l1.w"], stride=2, pad=1, bias=p["l1.b"]))
        h = T.leaky_relu(T.instance_norm(T.conv2d(h, p["l2.w"], stride=2, pad=1)))
        return T.conv2d(h, p["l3.w"], pad=1, bias=p["l3.b"])

    __call__ = forward


class ProjectionHeads(Net):
    """One two-layer MLP per encoder tap; outputs are L2-normalized."""

    def __init__(self, in_channels: list[int], dim: int = 32, seed: int = 2):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.count = len(in_channels)
        for i, c in enumerate(in_channels):
            self._param(f"h{i}.w1", rng.normal(0.0, 0.02, size=(c, dim)))
            self._param(f"h{i}.b1", rng.normal(0.0, 0.02, size=(1, dim)))
            self._param(f"h{i}.w2", rng.normal(0.0, 0.02, size=(dim, dim)))
            # nonzero bias keeps all-zero inputs off the origin
            self._param(f"h{i}.b2", rng.normal(0.0, 0.02, size=(1, dim)))

    def __call__(self, layer: int, feats) -> Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(feats, p[f"h{layer}.w1"]), p[f"h{layer}.b1"]))
        h = T.add(T.matmul(h, p[f"h{layer}.w2"]), p[f"h{layer}.b2"])
        return T.l2_normalize_rows(h)


def image_to_tensor(img: np.ndarray) -> np.ndarray:
    """uint8 H×W×3 → float C×H×W in [-1, 1]."""
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def tensor_to_image(x: np.ndarray) -> np.ndarray:
    """float C×H×W in [-1, 1] → uint8 H×W×3."""
    a = np.clip((np.asarray(x).transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.rint(a).astype(np.uint8)
