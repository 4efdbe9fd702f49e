"""Static per-layer profiles: output size, parameter count, forward flops.

Profiles let the timing, memory and planner code reason about models that
are never instantiated (VGG-16 at 138M parameters is only ever described,
not allocated). ``activation_elements`` is what a layer adds to resident
memory; it differs from ``output_elements`` only for in-place layers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU
from .model import BYTES_PER_VALUE, MemoryDemand, SequentialModel


@dataclass(frozen=True)
class LayerStat:
    name: str
    kind: str
    output_elements: int
    params: int
    flops: int
    activation_elements: int


@dataclass(frozen=True)
class LayerProfile:
    name: str
    input_elements: int
    layers: tuple[LayerStat, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def slice(self, start: int, stop: int | None = None) -> "LayerProfile":
        stop = len(self.layers) if stop is None else stop
        inp = self.input_elements if start == 0 else self.layers[start - 1].output_elements
        return LayerProfile(f"{self.name}[{start}:{stop}]", inp, self.layers[start:stop])

    def boundary_elements(self, d: int) -> int:
        """Per-sample elements crossing a cut that leaves ``d`` layers on the client."""
        if not 0 <= d <= len(self.layers):
            raise ValueError(f"cut index {d} outside [0, {len(self.layers)}]")
        return self.input_elements if d == 0 else self.layers[d - 1].output_elements

    @property
    def output_elements(self) -> int:
        return self.layers[-1].output_elements if self.layers else self.input_elements

    def forward_flops(self) -> int:
        return sum(s.flops for s in self.layers)

    def param_count(self) -> int:
        return sum(s.params for s in self.layers)

    def memory(self, batch: int) -> MemoryDemand:
        acts = sum(s.activation_elements for s in self.layers)
        return MemoryDemand(BYTES_PER_VALUE * self.param_count(), BYTES_PER_VALUE * batch * acts)

    def to_json(self) -> dict:
        return {"name": self.name, "input_elements": self.input_elements,
                "layers": [asdict(s) for s in self.layers]}

    @classmethod
    def from_json(cls, blob: dict) -> "LayerProfile":
        layers = []
        for row in blob["layers"]:
            row = dict(row)
            row.setdefault("kind", "layer")
            row.setdefault("activation_elements", row["output_elements"])
            layers.append(LayerStat(**row))
        return cls(blob["name"], int(blob["input_elements"]), tuple(layers))

    @classmethod
    def from_model(cls, model: SequentialModel, inplace_relu: bool = False) -> "LayerProfile":
        stats = []
        shape = model.input_shape
        for i, (layer, out) in enumerate(zip(model.layers, model.shapes)):
            elems = int(np.prod(out))
            act = 0 if (inplace_relu and layer.kind == "relu") else elems
            stats.append(LayerStat(f"{i}:{layer.kind}", layer.kind, elems, layer.param_count(),
                                   layer.flops(shape), act))
            shape = out
        return cls(model.name, int(np.prod(model.input_shape)), tuple(stats))


def as_profile(part) -> LayerProfile:
    return part if isinstance(part, LayerProfile) else LayerProfile.from_model(part)


# -- bundled architectures ---------------------------------------------------
_VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def vgg16_profile(input_hw: int = 32, num_classes: int = 10) -> LayerProfile:
    """VGG-16 as laid out by the usual ``features`` / ``avgpool`` / ``classifier`` stack.

    ReLUs run in place, so they add no resident activation memory. The
    adaptive average pool resizes to 7x7 before the 25088-wide classifier.
    """
    layers = []
    c, h = 3, input_hw
    for v in _VGG16_CFG:
        idx = len(layers)
        if v == "M":
            h //= 2
            n = c * h * h
            layers.append(LayerStat(f"features.{idx}", "maxpool2d", n, 0, 0, n))
        else:
            n = v * h * h
            params = c * v * 9 + v
            layers.append(LayerStat(f"features.{idx}", "conv2d", n, params, 2 * c * 9 * v * h * h, n))
            layers.append(LayerStat(f"features.{idx + 1}", "relu", n, 0, 0, 0))
            c = v
    pooled = c * 7 * 7
    layers.append(LayerStat("avgpool", "avgpool", pooled, 0, 0, pooled))
    layers.append(LayerStat("flatten", "flatten", pooled, 0, 0, pooled))
    widths = (pooled, 4096, 4096, num_classes)
    for j in range(3):
        fin, fout = widths[j], widths[j + 1]
        base = 3 * j
        layers.append(LayerStat(f"classifier.{base}", "dense", fout, fin * fout + fout, 2 * fin * fout, fout))
        if j < 2:
            layers.append(LayerStat(f"classifier.{base + 1}", "relu", fout, 0, 0, 0))
            layers.append(LayerStat(f"classifier.{base + 2}", "dropout", fout, 0, 0, fout))
    return LayerProfile("vgg16", 3 * input_hw * input_hw, tuple(layers))


def vgg16_block_cut(block: int) -> int:
    """Client depth that ends right after the pooling of convolutional block ``block`` (1-based)."""
    pools = [i + 1 for i, s in enumerate(vgg16_profile().layers) if s.kind == "maxpool2d"]
    return pools[block - 1]


def lenet_model(num_classes: int = 10) -> SequentialModel:
    return SequentialModel(
        [Conv2d(1, 6, 5, padding=2), ReLU(), MaxPool2d(2), Conv2d(6, 16, 5), ReLU(), MaxPool2d(2),
         Flatten(), Dense(400, 120), ReLU(), Dense(120, 84), ReLU(), Dense(84, num_classes)],
        (1, 28, 28), "lenet")


def cnn1d_model(length: int = 784, num_classes: int = 12) -> SequentialModel:
    """Two-convolution 1-D traffic classifier, expressed with (1, k) kernels."""
    l1 = length // 3
    l2 = (l1 - 24) // 3
    return SequentialModel(
        [Conv2d(1, 32, (1, 25), padding=(0, 12)), ReLU(), MaxPool2d((1, 3)),
         Conv2d(32, 64, (1, 25)), ReLU(), MaxPool2d((1, 3)),
         Flatten(), Dense(64 * l2, 1024), ReLU(), Dense(1024, num_classes)],
        (1, 1, length), "cnn1d")


def digits_mlp(num_classes: int = 10) -> SequentialModel:
    return SequentialModel([Flatten(), Dense(64, 32), ReLU(), Dense(32, 32), ReLU(), Dense(32, num_classes)],
                           (1, 8, 8), "digits_mlp")


def digits_cnn(num_classes: int = 10) -> SequentialModel:
    return SequentialModel(
        [Conv2d(1, 8, 3, padding=1), ReLU(), MaxPool2d(2), Conv2d(8, 16, 3, padding=1), ReLU(), MaxPool2d(2),
         Flatten(), Dense(64, num_classes)],
        (1, 8, 8), "digits_cnn")


def signal_cnn(length: int = 64, num_classes: int = 4) -> SequentialModel:
    """Small 1-D classifier for the synthetic signal task."""
    l1 = length // 2
    return SequentialModel(
        [Conv2d(1, 8, (1, 5), padding=(0, 2)), ReLU(), MaxPool2d((1, 2)),
         Conv2d(8, 8, (1, 5), padding=(0, 2)), ReLU(), MaxPool2d((1, 2)),
         Flatten(), Dense(8 * (l1 // 2), 32), ReLU(), Dense(32, num_classes)],
        (1, 1, length), "signal_cnn")


MODELS = {"digits_mlp": digits_mlp, "digits_cnn": digits_cnn, "signal_cnn": signal_cnn,
          "lenet": lenet_model, "cnn1d": cnn1d_model}


def build_model(name: str, num_classes: int) -> SequentialModel:
    try:
        return MODELS[name](num_classes=num_classes)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def _builtin_profiles() -> dict[str, LayerProfile]:
    return {
        "vgg16": vgg16_profile(),
        "lenet": LayerProfile.from_model(lenet_model()),
        "cnn1d": LayerProfile.from_model(cnn1d_model()),
    }


def load_profile(name_or_path: str | Path) -> LayerProfile:
    """Load a bundled profile by name or a profile JSON file by path."""
    name = str(name_or_path)
    bundled = resources.files("splitbench") / "data" / f"profile_{name}.json"
    if bundled.is_file():
        return LayerProfile.from_json(json.loads(bundled.read_text()))
    return LayerProfile.from_json(json.loads(Path(name_or_path).read_text()))


def write_bundled_profiles(directory: str | Path) -> list[Path]:
    out = []
    for name, prof in _builtin_profiles().items():
        path = Path(directory) / f"profile_{name}.json"
        path.write_text(json.dumps(prof.to_json(), indent=1) + "\n")
        out.append(path)
    return out


def builtin_profile(name: str) -> LayerProfile:
    return _builtin_profiles()[name]


def profile_names() -> Sequence[str]:
    return tuple(_builtin_profiles())
