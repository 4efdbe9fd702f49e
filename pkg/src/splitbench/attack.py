"""Honest-but-curious reconstruction attack on boundary activations.

The attacker knows the client architecture and the publicly broadcast
initial weights, never the victim's trained client weights. It trains a
mirrored autoencoder on a look-alike dataset, decodes captured activations,
and scores the reconstructions with a classifier trained on real data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .layers import (ConvTranspose2d, Conv2d, Dense, Layer, MaxPool2d, ReLU, Reshape, Sigmoid,
                     Upsample2d, _pair)
from .model import SequentialModel, cut
from .privacy import sgd_update
from .tensor import Tensor

_ACTIVATIONS = ("relu", "sigmoid")


class MirrorError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    autoencoder_epochs: int = 20
    classifier_epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.1
    seed: int = 0
    attacker_dataset: str = "synthetic_letters"

    def __post_init__(self):
        if self.autoencoder_epochs < 1 or self.classifier_epochs < 1:
            raise ValueError("attack epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class AttackReport:
    reconstructions: np.ndarray
    n_reconstructed: int
    n_correct: int
    tau: float
    reconstruction_mse: float

    def to_json(self) -> dict:
        return {"n_reconstructed": self.n_reconstructed, "n_correct": self.n_correct, "tau": self.tau,
                "reconstruction_mse": self.reconstruction_mse}

    def save(self, path: str | Path, pgm_dir: str | Path | None = None, max_images: int = 16) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        if pgm_dir is not None:
            write_pgm_grid(self.reconstructions[:max_images], Path(pgm_dir) / "reconstructions.pgm")


def tau(n_correct: int, n_reconstructed: int) -> float:
    """Misclassification rate of the reconstructions."""
    if n_reconstructed <= 0:
        raise ValueError("tau needs at least one reconstruction")
    if not 0 <= n_correct <= n_reconstructed:
        raise ValueError(f"n_correct={n_correct} outside [0, {n_reconstructed}]")
    return 1.0 - n_correct / n_reconstructed


# -- autoencoder construction -------------------------------------------------------
def _mirror(layer: Layer, in_shape, out_shape) -> Layer | None:
    """Decoder layer mapping ``out_shape`` back to ``in_shape``; ``None`` drops the layer."""
    kind = layer.kind
    if kind in _ACTIVATIONS:
        return None
    if kind == "dense":
        return Dense(layer.out_features, layer.in_features, layer.bias)
    if kind == "conv2d":
        (kh, kw), (sh, sw), (ph, pw) = _pair(layer.kernel), _pair(layer.stride), _pair(layer.padding)
        oph = in_shape[1] - ((out_shape[1] - 1) * sh - 2 * ph + kh)
        opw = in_shape[2] - ((out_shape[2] - 1) * sw - 2 * pw + kw)
        if not (0 <= oph < sh and 0 <= opw < sw):
            raise MirrorError(f"conv2d {layer} cannot be inverted to {in_shape}")
        return ConvTranspose2d(layer.out_channels, layer.in_channels, layer.kernel, layer.stride,
                               layer.padding, (oph, opw), layer.bias)
    if kind == "transposed_conv2d":
        mirror = Conv2d(layer.out_channels, layer.in_channels, layer.kernel, layer.stride, layer.padding,
                        layer.bias)
        if mirror.output_shape(tuple(out_shape)) != tuple(in_shape):
            raise MirrorError(f"transposed_conv2d {layer} cannot be inverted to {in_shape}")
        return mirror
    if kind == "maxpool2d":
        kh, kw = _pair(layer.kernel)
        sh, sw = (kh, kw) if layer.stride is None else _pair(layer.stride)
        if (out_shape[1] * sh, out_shape[2] * sw) != tuple(in_shape[1:]):
            raise MirrorError(f"maxpool2d {layer} on {in_shape} is not exactly invertible by upsampling")
        return Upsample2d((sh, sw))
    if kind == "upsample2d":
        sh, sw = _pair(layer.scale)
        return MaxPool2d((sh, sw))
    if kind in ("flatten", "reshape"):
        return Reshape(tuple(in_shape))
    raise MirrorError(f"no mirror rule for layer kind {kind!r}")


def build_decoder(client_arch: SequentialModel) -> SequentialModel:
    """Reverse the client stack layer by layer.

    Parametric decoder layers are separated by ReLU and the last one is
    followed by a sigmoid. A client without parametric layers mirrors to a
    pure reshape (the activations already are the input).
    """
    shapes = [client_arch.input_shape] + list(client_arch.shapes)
    mirrored: list[Layer] = []
    for i in reversed(range(len(client_arch.layers))):
        m = _mirror(client_arch.layers[i], shapes[i], shapes[i + 1])
        if m is not None:
            mirrored.append(m)
    param_idx = [i for i, m in enumerate(mirrored) if m.param_shapes()]
    layers: list[Layer] = []
    for i, m in enumerate(mirrored):
        layers.append(m)
        if param_idx and i in param_idx[:-1]:
            layers.append(ReLU())
    if param_idx:
        layers.append(Sigmoid())  # elementwise, so it commutes with trailing reshapes/upsampling
    return SequentialModel(layers, client_arch.output_shape, "decoder")


def build_autoencoder(client_arch: SequentialModel) -> SequentialModel:
    """Encoder (a copy of the client architecture) followed by its mirrored decoder."""
    encoder = SequentialModel.from_spec(client_arch.spec())
    decoder = build_decoder(client_arch)
    return SequentialModel(encoder.layers + decoder.layers, client_arch.input_shape, "autoencoder")


# -- training helpers ----------------------------------------------------------------
def _sgd_epochs(model: SequentialModel, x: np.ndarray, target, loss_fn, epochs: int, batch: int, lr: float,
                rng: np.random.Generator) -> None:
    if not model.params:
        return
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch):
            idx = order[s:s + batch]
            loss = loss_fn(model(Tensor(x[idx])), target[idx])
            model.zero_grad()
            loss.backward()
            if not np.isfinite(loss.item()):
                raise FloatingPointError("attack training diverged")
            sgd_update(model.params, [p.grad for p in model.params], lr)


def _mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return T.mse(pred, Tensor(target))


def run_attack(architecture: SequentialModel, cut_index: int, intermediate: np.ndarray, source: Dataset,
               attacker_data: Dataset, cfg: AttackConfig, public_init_seed: int,
               classifier_data: Dataset | None = None) -> AttackReport:
    """Reconstruct ``source.x`` from its captured client activations ``intermediate``.

    Only ``architecture.spec()`` is read; the encoder starts from the public
    initialisation ``architecture.init(public_init_seed)`` and the victim's
    trained weights are never consulted. The scoring classifier is a fresh
    copy of the full architecture trained on ``classifier_data`` (defaults
    to ``source``).
    """
    spec = architecture.spec()
    full = SequentialModel.from_spec(spec).init(public_init_seed)
    client = cut(full, cut_index).client
    expected = (len(source),) + tuple(client.output_shape)
    if tuple(intermediate.shape) != expected:
        raise ValueError(f"captured activations have shape {intermediate.shape}, encoder emits {expected}")
    if tuple(attacker_data.x.shape[1:]) != tuple(architecture.input_shape):
        raise ValueError("attacker dataset must share the victim's input shape")

    rng = np.random.default_rng([cfg.seed, 17])
    decoder = build_decoder(client).init(rng)
    auto = SequentialModel(client.layers + decoder.layers, client.input_shape, "autoencoder")
    _sgd_epochs(auto, attacker_data.x, attacker_data.x, _mse_loss, cfg.autoencoder_epochs, cfg.batch_size,
                cfg.learning_rate, np.random.default_rng([cfg.seed, 18]))

    with T.no_grad():
        recon = decoder(Tensor(intermediate)).data
    classifier = SequentialModel.from_spec(spec).init(np.random.default_rng([cfg.seed, 19]))
    train = classifier_data or source
    _sgd_epochs(classifier, train.x, train.y, T.cross_entropy, cfg.classifier_epochs, cfg.batch_size,
                cfg.learning_rate, np.random.default_rng([cfg.seed, 20]))
    with T.no_grad():
        pred = classifier(Tensor(recon)).data.argmax(axis=1)
    n_correct = int((pred == source.y).sum())
    n = len(source)
    return AttackReport(recon, n, n_correct, tau(n_correct, n), float(np.mean((recon - source.x) ** 2)))


def write_pgm_grid(images: np.ndarray, path: str | Path, cols: int = 8) -> None:
    """Tile single-channel images in [0, 1] into one binary PGM."""
    imgs = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0)
    imgs = imgs.reshape(len(imgs), imgs.shape[-2], imgs.shape[-1]) if imgs.ndim == 4 else imgs
    n, h, w = imgs.shape
    rows = max(1, -(-n // cols))
    grid = np.zeros((rows * h, cols * w))
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = imgs[k]
    raw = np.round(grid * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raw.shape[1]} {raw.shape[0]}\n255\n".encode())
        fh.write(raw.tobytes())
