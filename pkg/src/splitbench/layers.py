"""Layer definitions.

Every layer can report its output shape from an input shape (per-sample,
batch dimension excluded) without running, and exposes its trainable
tensors through ``params``. Weights are initialised uniformly in
``±sqrt(1/fan_in)`` from the generator passed to :meth:`Layer.init`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import tensor as T
from .tensor import Tensor

Shape = tuple[int, ...]


class ShapeError(ValueError):
    pass


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


@dataclass
class Layer:
    kind: ClassVar[str] = ""
    weights: list[Tensor] = field(default_factory=list, init=False, repr=False, compare=False)

    def output_shape(self, shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def init(self, rng: np.random.Generator) -> None:
        """Allocate and initialise weights; parameter-free layers do nothing."""

    @property
    def params(self) -> list[Tensor]:
        return self.weights

    def param_count(self) -> int:
        return sum(self.param_shapes_sizes())

    def param_shapes_sizes(self) -> list[int]:
        return [int(np.prod(s)) for s in self.param_shapes()]

    def param_shapes(self) -> list[Shape]:
        return []

    def flops(self, shape: Shape) -> int:
        """Multiply-add count (x2) for one sample's forward pass."""
        return 0

    def spec(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "weights"}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return {"kind": self.kind, **d}

    def _alloc(self, rng: np.random.Generator, fan_in: int) -> None:
        bound = np.sqrt(1.0 / fan_in)
        self.weights = [Tensor(rng.uniform(-bound, bound, size=s), requires_grad=True)
                        for s in self.param_shapes()]


@dataclass
class Dense(Layer):
    kind: ClassVar[str] = "dense"
    in_features: int
    out_features: int
    bias: bool = True

    def param_shapes(self):
        shapes = [(self.out_features, self.in_features)]
        if self.bias:
            shapes.append((self.out_features,))
        return shapes

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def init(self, rng):
        self._alloc(rng, self.in_features)

    def forward(self, x):
        return T.linear(x, self.weights[0], self.weights[1] if self.bias else None)

    def flops(self, shape):
        return 2 * self.in_features * self.out_features


@dataclass
class Conv2d(Layer):
    kind: ClassVar[str] = "conv2d"
    in_channels: int
    out_channels: int
    kernel: int | tuple[int, int] = 3
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0
    bias: bool = True

    def param_shapes(self):
        kh, kw = _pair(self.kernel)
        shapes = [(self.out_channels, self.in_channels, kh, kw)]
        if self.bias:
            shapes.append((self.out_channels,))
        return shapes

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W), got {shape}")
        (kh, kw), (sh, sw), (ph, pw) = _pair(self.kernel), _pair(self.stride), _pair(self.padding)
        oh, ow = _conv_out(shape[1], kh, sh, ph), _conv_out(shape[2], kw, sw, pw)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input {shape}")
        return (self.out_channels, oh, ow)

    def init(self, rng):
        kh, kw = _pair(self.kernel)
        self._alloc(rng, self.in_channels * kh * kw)

    def forward(self, x):
        return T.conv2d(x, self.weights[0], self.weights[1] if self.bias else None,
                        self.stride, self.padding)

    def flops(self, shape):
        kh, kw = _pair(self.kernel)
        _, oh, ow = self.output_shape(shape)
        return 2 * self.in_channels * kh * kw * self.out_channels * oh * ow


@dataclass
class ConvTranspose2d(Layer):
    kind: ClassVar[str] = "transposed_conv2d"
    in_channels: int
    out_channels: int
    kernel: int | tuple[int, int] = 3
    stride: int | tuple[int, int] = 1
    padding: int | tuple[int, int] = 0
    output_padding: int | tuple[int, int] = 0
    bias: bool = True

    def param_shapes(self):
        kh, kw = _pair(self.kernel)
        shapes = [(self.in_channels, self.out_channels, kh, kw)]
        if self.bias:
            shapes.append((self.out_channels,))
        return shapes

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"transposed_conv2d expects ({self.in_channels}, H, W), got {shape}")
        (kh, kw), (sh, sw) = _pair(self.kernel), _pair(self.stride)
        (ph, pw), (oph, opw) = _pair(self.padding), _pair(self.output_padding)
        oh = (shape[1] - 1) * sh - 2 * ph + kh + oph
        ow = (shape[2] - 1) * sw - 2 * pw + kw + opw
        if oh < 1 or ow < 1:
            raise ShapeError(f"transposed_conv2d produces empty output from {shape}")
        return (self.out_channels, oh, ow)

    def init(self, rng):
        kh, kw = _pair(self.kernel)
        self._alloc(rng, self.in_channels * kh * kw)

    def forward(self, x):
        return T.conv_transpose2d(x, self.weights[0], self.weights[1] if self.bias else None,
                                  self.stride, self.padding, self.output_padding)

    def flops(self, shape):
        kh, kw = _pair(self.kernel)
        return 2 * self.in_channels * kh * kw * self.out_channels * shape[1] * shape[2]


@dataclass
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return T.relu(x)


@dataclass
class Sigmoid(Layer):
    kind: ClassVar[str] = "sigmoid"

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return T.sigmoid(x)


@dataclass
class MaxPool2d(Layer):
    kind: ClassVar[str] = "maxpool2d"
    kernel: int | tuple[int, int] = 2
    stride: int | tuple[int, int] | None = None

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {shape}")
        kh, kw = _pair(self.kernel)
        sh, sw = (kh, kw) if self.stride is None else _pair(self.stride)
        oh, ow = _conv_out(shape[1], kh, sh, 0), _conv_out(shape[2], kw, sw, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"maxpool2d window {self.kernel} does not fit input {shape}")
        return (shape[0], oh, ow)

    def forward(self, x):
        return T.maxpool2d(x, self.kernel, self.stride)


@dataclass
class Upsample2d(Layer):
    """Nearest-neighbour upsampling; the decoder mirror of max-pooling."""

    kind: ClassVar[str] = "upsample2d"
    scale: int | tuple[int, int] = 2

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"upsample2d expects (C, H, W), got {shape}")
        sh, sw = _pair(self.scale)
        return (shape[0], shape[1] * sh, shape[2] * sw)

    def forward(self, x):
        return T.upsample_nearest2d(x, self.scale)


@dataclass
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))


@dataclass
class Reshape(Layer):
    """Per-sample reshape; the decoder mirror of flatten."""

    kind: ClassVar[str] = "reshape"
    target: tuple[int, ...] = ()

    def __post_init__(self):
        self.target = tuple(int(v) for v in self.target)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.target)):
            raise ShapeError(f"cannot reshape {shape} to {self.target}")
        return self.target

    def forward(self, x):
        return T.reshape(x, (x.shape[0],) + self.target)


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (Dense, Conv2d, ConvTranspose2d, ReLU, Sigmoid, MaxPool2d, Upsample2d, Flatten, Reshape)
}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    for key, value in spec.items():
        if isinstance(value, list):
            spec[key] = tuple(value)
    return cls(**spec)
