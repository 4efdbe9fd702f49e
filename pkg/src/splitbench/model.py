"""Sequential models, cut-index partitioning and weight-vector averaging."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .layers import Layer, ShapeError, Shape, layer_from_spec
from .tensor import Tensor

BYTES_PER_VALUE = 8


def forward(layers: Sequence[Layer], x: Tensor) -> Tensor:
    """Run ``x`` through ``layers`` in order, checking shapes at every step."""
    for i, layer in enumerate(layers):
        sample = tuple(x.shape[1:])
        try:
            layer.output_shape(sample)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): input shape {sample} rejected: {exc}") from None
        x = layer.forward(x)
    return x


class SequentialModel:
    def __init__(self, layers: Iterable[Layer], input_shape: Sequence[int], name: str = "model"):
        self.layers: list[Layer] = list(layers)
        self.input_shape: Shape = tuple(int(v) for v in input_shape)
        self.name = name
        self.shapes = self._propagate()

    def _propagate(self) -> list[Shape]:
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = tuple(layer.output_shape(shape))
            except ShapeError as exc:
                raise ShapeError(f"{self.name}: layer {i} ({layer.kind}) cannot take {shape}: {exc}") from None
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1] if self.shapes else self.input_shape

    def __len__(self) -> int:
        return len(self.layers)

    def init(self, seed: int | np.random.Generator) -> "SequentialModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self.layers, x)

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def clone(self) -> "SequentialModel":
        return copy.deepcopy(self)

    def spec(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer.spec() for layer in self.layers]}

    @classmethod
    def from_spec(cls, spec: dict) -> "SequentialModel":
        return cls([layer_from_spec(s) for s in spec["layers"]], spec["input_shape"], spec.get("name", "model"))


@dataclass
class PartitionedModel:
    client: SequentialModel
    server: SequentialModel
    cut_index: int

    @property
    def layers(self) -> list[Layer]:
        return self.client.layers + self.server.layers

    def __call__(self, x: Tensor) -> Tensor:
        return self.server(self.client(x))


def cut(model: SequentialModel, d: int) -> PartitionedModel:
    """Split into a client part holding layers [0, d) and a server part holding the rest.

    Layer objects are shared with ``model``, not copied.
    """
    if not 0 <= d <= len(model.layers):
        raise ValueError(f"cut index {d} outside [0, {len(model.layers)}]")
    client = SequentialModel(model.layers[:d], model.input_shape, f"{model.name}/client")
    boundary = client.output_shape
    server = SequentialModel(model.layers[d:], boundary, f"{model.name}/server")
    return PartitionedModel(client, server, d)


# -- weight vectors ------------------------------------------------------
class Segment(NamedTuple):
    layer: int
    param: int
    shape: Shape


class WeightVector:
    """Immutable flat view of a model's trainable parameters."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Sequence[Segment]):
        values = np.array(values, dtype=np.float64)
        layout = tuple(Segment(int(s[0]), int(s[1]), tuple(s[2])) for s in layout)
        expected = sum(int(np.prod(s.shape)) for s in layout)
        if values.ndim != 1 or values.size != expected:
            raise ValueError(f"weight vector of length {values.size} does not match layout size {expected}")
        values.flags.writeable = False
        self.values = values
        self.layout = layout

    def __len__(self) -> int:
        return self.values.size

    def _check(self, other: "WeightVector") -> None:
        if self.layout != other.layout:
            raise ValueError("weight vectors have different layouts")

    def __add__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector(self.values + other.values, self.layout)

    def __sub__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "WeightVector":
        return WeightVector(self.values * scalar, self.layout)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        return (isinstance(other, WeightVector) and self.layout == other.layout
                and np.array_equal(self.values, other.values))

    def __repr__(self) -> str:
        return f"WeightVector(n={self.values.size}, segments={len(self.layout)})"

    def unflatten(self) -> list[np.ndarray]:
        out, pos = [], 0
        for seg in self.layout:
            size = int(np.prod(seg.shape))
            out.append(self.values[pos:pos + size].reshape(seg.shape).copy())
            pos += size
        return out


def get_weights(model: SequentialModel) -> WeightVector:
    layout, chunks = [], []
    for li, layer in enumerate(model.layers):
        for pi, p in enumerate(layer.params):
            layout.append(Segment(li, pi, p.shape))
            chunks.append(p.data.ravel())
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return WeightVector(values, layout)


def set_weights(model: SequentialModel, weights: WeightVector) -> None:
    current = get_weights(model)
    if current.layout != weights.layout:
        raise ValueError(f"layout mismatch loading weights into {model.name}")
    for seg, arr in zip(weights.layout, weights.unflatten()):
        model.layers[seg.layer].params[seg.param].data = arr


def fed_avg(weights: Sequence[WeightVector]) -> WeightVector:
    """Unweighted elementwise mean of full-model weight vectors."""
    if not weights:
        raise ValueError("fed_avg needs at least one weight vector")
    first = weights[0]
    for w in weights[1:]:
        first._check(w)
    if len(weights) == 1:
        return first
    # offsets from the per-coordinate minimum, summed in sorted order: the
    # result is independent of list order and exact when all inputs agree
    stacked = np.stack([w.values for w in weights])
    ref = stacked.min(axis=0)
    deltas = np.sort(stacked - ref, axis=0)
    return WeightVector(ref + deltas.sum(axis=0) / len(weights), first.layout)


def ser_avg(server_weights: Sequence[WeightVector]) -> WeightVector:
    """Server-side averaging: same arithmetic as fed_avg, restricted to server parts."""
    return fed_avg(server_weights)


# -- memory --------------------------------------------------------------
class MemoryDemand(NamedTuple):
    weight_bytes: int
    activation_bytes: int

    @property
    def total(self) -> int:
        return self.weight_bytes + self.activation_bytes


def memory_demand(model_part: SequentialModel, batch: int, input_shape: Sequence[int] | None = None) -> MemoryDemand:
    """Bytes held for weights plus every layer's output (input excluded)."""
    if input_shape is not None and tuple(input_shape) != model_part.input_shape:
        model_part = SequentialModel(model_part.layers, input_shape, model_part.name)
    params = model_part.param_count()
    acts = sum(int(np.prod(s)) for s in model_part.shapes)
    return MemoryDemand(BYTES_PER_VALUE * params, BYTES_PER_VALUE * batch * acts)


# -- files ---------------------------------------------------------------
_MAGIC = b"SPLW"


def save_model_spec(model: SequentialModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.spec(), indent=2, sort_keys=True) + "\n")


def load_model_spec(path: str | Path) -> SequentialModel:
    return SequentialModel.from_spec(json.loads(Path(path).read_text()))


def save_checkpoint(weights: WeightVector, path: str | Path) -> None:
    """Write ``SPLW`` + uint32 header length + JSON layout + little-endian float64 values."""
    header = json.dumps([[s.layer, s.param, list(s.shape)] for s in weights.layout]).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(weights.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> WeightVector:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path} is not a weight checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    layout = json.loads(blob[8:8 + hlen].decode())
    values = np.frombuffer(blob[8 + hlen:], dtype="<f8").astype(np.float64)
    return WeightVector(values, [Segment(a, b, tuple(c)) for a, b, c in layout])
