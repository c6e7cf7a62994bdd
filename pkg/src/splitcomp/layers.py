"""Network layers built on the autodiff tensor library.

Every layer knows its output shape and MAC count as pure functions of the
input shape, so whole-model shape inference and encoder cost accounting
never require a forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LAYER_KINDS = ("conv2d", "linear", "gdn", "igdn", "relu", "avgpool", "residual-block", "flatten")


class ConfigError(ValueError):
    """Raised for invalid layer/model configuration."""


@dataclass
class LayerSpec:
    """Declarative layer description; output shape is a pure function of input shape."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    spec: LayerSpec

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def macs(self, in_shape: tuple[int, ...]) -> int:
        return 0

    def project(self) -> None:
        """Clamp parameters back into their valid domain after an update."""

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        if in_ch < 1 or out_ch < 1 or kernel < 1:
            raise ConfigError("conv2d: channels and kernel must be >= 1")
        self.spec = LayerSpec("conv2d", dict(in_ch=in_ch, out_ch=out_ch, kernel=kernel,
                                             stride=stride, padding=padding))
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = T.parameter(_uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), fan_in), "weight")
        self.bias = T.parameter(np.zeros(out_ch), "bias")
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        p = self.spec.params
        if c != p["in_ch"]:
            raise ShapeError(f"conv2d: expected {p['in_ch']} channels, got {c}")
        oh, ow = T.conv2d_out_hw(h, w, p["kernel"], p["stride"], p["padding"])
        return (n, p["out_ch"], oh, ow)

    def macs(self, in_shape):
        p = self.spec.params
        _, o, oh, ow = self.out_shape(in_shape)
        return p["out_ch"] * p["in_ch"] * p["kernel"] ** 2 * oh * ow


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        self.spec = LayerSpec("linear", dict(in_features=in_features, out_features=out_features))
        rng = rng or np.random.default_rng(0)
        self.weight = T.parameter(_uniform_fan_in(rng, (out_features, in_features), in_features), "weight")
        self.bias = T.parameter(np.zeros(out_features), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        n, f = in_shape
        if f != self.spec.params["in_features"]:
            raise ShapeError(f"linear: expected {self.spec.params['in_features']} features, got {f}")
        return (n, self.spec.params["out_features"])

    def macs(self, in_shape):
        return self.spec.params["in_features"] * self.spec.params["out_features"]


class GDN(Layer):
    """(Inverse) generalized divisive normalization. beta=1, gamma=0.1*I at init."""

    def __init__(self, channels: int, inverse: bool = False):
        self.spec = LayerSpec("igdn" if inverse else "gdn", dict(channels=channels))
        self.inverse = inverse
        self.beta = T.parameter(np.ones(channels), "beta")
        self.gamma = T.parameter(0.1 * np.eye(channels), "gamma")

    def forward(self, x: Tensor) -> Tensor:
        return T.gdn(x, self.beta, self.gamma, inverse=self.inverse)

    def params(self):
        return [("beta", self.beta), ("gamma", self.gamma)]

    def project(self):
        np.maximum(self.beta.data, 1e-6, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)

    def out_shape(self, in_shape):
        if in_shape[1] != self.spec.params["channels"]:
            raise ShapeError(f"gdn: expected {self.spec.params['channels']} channels, got {in_shape[1]}")
        return in_shape

    def macs(self, in_shape):
        c = self.spec.params["channels"]
        hw = int(np.prod(in_shape[2:])) if len(in_shape) == 4 else 1
        return c * c * hw


class ReLU(Layer):
    def __init__(self):
        self.spec = LayerSpec("relu")

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def out_shape(self, in_shape):
        return in_shape


class GlobalAvgPool(Layer):
    def __init__(self):
        self.spec = LayerSpec("avgpool")

    def forward(self, x: Tensor) -> Tensor:
        return T.global_avg_pool(x)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c)


class Flatten(Layer):
    def __init__(self):
        self.spec = LayerSpec("flatten")

    def forward(self, x: Tensor) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))

    def out_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))


class ResidualBlock(Layer):
    """Two 3x3 convs with a skip connection; 1x1 projection when shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, rng: np.random.Generator | None = None):
        self.spec = LayerSpec("residual-block", dict(in_ch=in_ch, out_ch=out_ch, stride=stride))
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, rng=rng)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = self.conv2(h)
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(T.add(h, skip))

    def params(self):
        out = [(f"conv1.{n}", p) for n, p in self.conv1.params()]
        out += [(f"conv2.{n}", p) for n, p in self.conv2.params()]
        if self.proj is not None:
            out += [(f"proj.{n}", p) for n, p in self.proj.params()]
        return out

    def out_shape(self, in_shape):
        return self.conv2.out_shape(self.conv1.out_shape(in_shape))

    def macs(self, in_shape):
        mid = self.conv1.out_shape(in_shape)
        total = self.conv1.macs(in_shape) + self.conv2.macs(mid)
        if self.proj is not None:
            total += self.proj.macs(in_shape)
        return total


class Upsample2x(Layer):
    """Nearest-neighbour upsampling used inside hyper-decoders."""

    def __init__(self):
        self.spec = LayerSpec("relu", {"upsample2x": True})  # param-free; internal only

    def forward(self, x: Tensor) -> Tensor:
        return T.upsample2x(x)

    def out_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c, 2 * h, 2 * w)


def make_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    p = spec.params
    if spec.kind == "conv2d":
        return Conv2d(p["in_ch"], p["out_ch"], p["kernel"], p.get("stride", 1), p.get("padding", 0), rng)
    if spec.kind == "linear":
        return Linear(p["in_features"], p["out_features"], rng)
    if spec.kind == "gdn":
        return GDN(p["channels"], inverse=False)
    if spec.kind == "igdn":
        return GDN(p["channels"], inverse=True)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "avgpool":
        return GlobalAvgPool()
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "residual-block":
        return ResidualBlock(p["in_ch"], p["out_ch"], p.get("stride", 1), rng)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def infer_shapes(layers: Sequence[Layer], in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Shapes after each layer; raises ShapeError if the composition is invalid."""
    shapes = []
    cur = tuple(in_shape)
    for layer in layers:
        cur = layer.out_shape(cur)
        shapes.append(cur)
    return shapes


def run_layers(layers: Sequence[Layer], x: Tensor) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


def named_params(layers: Sequence[Layer], prefix: str) -> list[tuple[str, Tensor]]:
    out = []
    for i, layer in enumerate(layers):
        for n, p in layer.params():
            out.append((f"{prefix}.{i}.{n}", p))
    return out


def param_count(layers: Sequence[Layer]) -> int:
    return sum(p.size for _, p in named_params(layers, "x"))


def layer_macs(layers: Sequence[Layer], in_shape: tuple[int, ...]) -> int:
    total = 0
    cur = tuple(in_shape)
    for layer in layers:
        total += layer.macs(cur)
        cur = layer.out_shape(cur)
    return total
