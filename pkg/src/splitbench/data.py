"""Desk-scale datasets and client partitioning.

Images come from a small stroke renderer: each class is a polyline glyph
drawn at 32x32 with a random affine jitter, then box-filtered to 8x8 and
lightly noised. Digits are the learner's data; letters drawn by the same
renderer are the attacker's look-alike dataset.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

_CIRCLE = [(0.5 + 0.22 * np.cos(t), 0.5 + 0.36 * np.sin(t)) for t in np.linspace(0, 2 * np.pi, 17)]


def _loop(cx, cy, rx, ry, n=13):
    return [(cx + rx * np.cos(t), cy + ry * np.sin(t)) for t in np.linspace(0, 2 * np.pi, n)]


DIGIT_GLYPHS: tuple[tuple[list, ...], ...] = (
    (_CIRCLE,),
    ([(0.35, 0.25), (0.52, 0.1), (0.52, 0.9)],),
    ([(0.25, 0.3), (0.35, 0.15), (0.65, 0.15), (0.75, 0.3), (0.7, 0.45), (0.25, 0.9), (0.78, 0.9)],),
    ([(0.25, 0.15), (0.75, 0.15), (0.5, 0.45), (0.72, 0.6), (0.7, 0.82), (0.5, 0.9), (0.25, 0.85)],),
    ([(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.8, 0.65)],),
    ([(0.75, 0.12), (0.3, 0.12), (0.27, 0.45), (0.6, 0.42), (0.75, 0.6), (0.7, 0.82), (0.5, 0.9), (0.25, 0.85)],),
    ([(0.7, 0.12), (0.4, 0.3), (0.28, 0.6), (0.35, 0.85), (0.6, 0.88), (0.72, 0.7), (0.6, 0.52), (0.3, 0.58)],),
    ([(0.22, 0.12), (0.78, 0.12), (0.45, 0.9)],),
    (_loop(0.5, 0.3, 0.17, 0.17), _loop(0.5, 0.7, 0.21, 0.2)),
    (_loop(0.5, 0.32, 0.2, 0.18), [(0.7, 0.32), (0.6, 0.9)]),
)

LETTER_GLYPHS: tuple[tuple[list, ...], ...] = (
    ([(0.2, 0.9), (0.5, 0.1), (0.8, 0.9)], [(0.33, 0.6), (0.67, 0.6)]),            # A
    ([(0.75, 0.2), (0.55, 0.1), (0.3, 0.2), (0.22, 0.5), (0.3, 0.8), (0.55, 0.9), (0.75, 0.8)],),  # C
    ([(0.75, 0.1), (0.25, 0.1), (0.25, 0.9), (0.75, 0.9)], [(0.25, 0.5), (0.65, 0.5)]),  # E
    ([(0.25, 0.1), (0.25, 0.9)], [(0.75, 0.1), (0.75, 0.9)], [(0.25, 0.5), (0.75, 0.5)]),  # H
    ([(0.3, 0.1), (0.3, 0.9)], [(0.75, 0.1), (0.3, 0.55), (0.75, 0.9)]),            # K
    ([(0.3, 0.1), (0.3, 0.9), (0.75, 0.9)],),                                         # L
    ([(0.25, 0.9), (0.25, 0.1), (0.75, 0.9), (0.75, 0.1)],),                          # N
    ([(0.2, 0.1), (0.8, 0.1)], [(0.5, 0.1), (0.5, 0.9)]),                             # T
    ([(0.2, 0.1), (0.5, 0.9), (0.8, 0.1)],),                                          # V
    ([(0.2, 0.1), (0.8, 0.9)], [(0.8, 0.1), (0.2, 0.9)]),                             # X
    ([(0.2, 0.1), (0.8, 0.1), (0.2, 0.9), (0.8, 0.9)],),                              # Z
    ([(0.25, 0.9), (0.25, 0.1), (0.6, 0.1), (0.75, 0.25), (0.6, 0.45), (0.25, 0.45)],),  # P
)


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float64 in [0, 1] for images
    y: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


@dataclass
class ClientData:
    train: Dataset
    test: Dataset
    part: int = 0


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(strokes, rng: np.random.Generator, size: int = 8, supersample: int = 4,
                 noise: float = 0.1) -> np.ndarray:
    """Rasterise one jittered glyph to a (size, size) image in [0, 1]."""
    hi = size * supersample
    coords = (np.arange(hi) + 0.5) / hi
    py, px = np.meshgrid(coords, coords, indexing="ij")
    angle = rng.uniform(-0.35, 0.35)
    scale = rng.uniform(0.8, 1.1)
    shift = rng.uniform(-0.1, 0.1, size=2)
    width = rng.uniform(0.04, 0.07)
    cos, sin = np.cos(angle), np.sin(angle)
    # inverse-map pixels into glyph space
    ux, uy = px - 0.5 - shift[0], py - 0.5 - shift[1]
    gx = (cos * ux + sin * uy) / scale + 0.5
    gy = (-sin * ux + cos * uy) / scale + 0.5
    dist = np.full((hi, hi), np.inf)
    for stroke in strokes:
        for a, b in zip(stroke[:-1], stroke[1:]):
            dist = np.minimum(dist, _segment_distance(gx, gy, a, b))
    img = np.clip(1.0 - (dist - width) / 0.04, 0.0, 1.0)
    img = img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_digits(n: int, seed: int, num_classes: int = 10, glyphs=DIGIT_GLYPHS) -> Dataset:
    if num_classes > len(glyphs):
        raise ValueError(f"only {len(glyphs)} glyphs available, asked for {num_classes} classes")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = np.stack([render_glyph(glyphs[c], rng) for c in y])[:, None]
    return Dataset(x, y.astype(np.int64))


def synthetic_letters(n: int, seed: int) -> Dataset:
    """Attacker-side look-alike data: same renderer, disjoint glyph set."""
    return synthetic_digits(n, seed, num_classes=len(LETTER_GLYPHS), glyphs=LETTER_GLYPHS)


def synthetic_1d(n: int, seed: int, num_classes: int = 4, length: int = 64) -> Dataset:
    """Zero-centred windowed tones at a random position and phase; class = frequency.

    Random phase and position make the classes non-linearly separable.
    """
    rng = np.random.default_rng(seed)
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    t = np.arange(length)
    x = np.empty((n, 1, 1, length))
    width = length // 3
    for i, c in enumerate(y):
        start = rng.integers(0, length - width)
        freq = (c + 1) / width
        phase = rng.uniform(0, 2 * np.pi)
        sig = np.zeros(length)
        span = t[start:start + width]
        sig[start:start + width] = np.sin(2 * np.pi * freq * (span - start) + phase) * np.hanning(width)
        x[i, 0, 0] = sig + rng.normal(0, 0.1, length)
    return Dataset(x, y.astype(np.int64))


def load_idx(path: str | Path) -> np.ndarray:
    """Read an IDX array (MNIST/EMNIST format), gzip or plain."""
    path = Path(path)
    raw = gzip.decompress(path.read_bytes()) if path.suffix == ".gz" else path.read_bytes()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise ValueError(f"{path} is not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return np.frombuffer(raw[4 + 4 * ndim:], dtype=dtypes[dtype_code]).reshape(dims)


def idx_dataset(images: str | Path, labels: str | Path) -> Dataset:
    x = load_idx(images).astype(np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    return Dataset(x[:, None] if x.ndim == 3 else x, load_idx(labels).astype(np.int64))


@dataclass(frozen=True)
class DatasetSpec:
    kind: Literal["synthetic_digits", "synthetic_1d", "file"] = "synthetic_digits"
    num_classes: int = 10
    samples_per_client: int = 200
    test_per_client: int = 100
    partition: Literal["iid", "two_part_noniid"] = "iid"
    mix_fraction: float = 0.10
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.mix_fraction <= 1.0:
            raise ValueError("mix_fraction must lie in [0, 1]")


def make_dataset(spec: DatasetSpec, num_clients: int, seed: int) -> tuple[Dataset, Dataset]:
    n_train = spec.samples_per_client * num_clients
    n_test = spec.test_per_client * num_clients
    if spec.kind == "synthetic_digits":
        return (synthetic_digits(n_train, seed, spec.num_classes),
                synthetic_digits(n_test, seed + 7919, spec.num_classes))
    if spec.kind == "synthetic_1d":
        return synthetic_1d(n_train, seed, spec.num_classes), synthetic_1d(n_test, seed + 7919, spec.num_classes)
    if spec.kind == "file":
        return (idx_dataset(spec.train_images, spec.train_labels),
                idx_dataset(spec.test_images, spec.test_labels))
    raise ValueError(f"unknown dataset kind {spec.kind!r}")


def _two_part(data: Dataset, num_classes: int, mix: float, rng: np.random.Generator) -> list[np.ndarray]:
    half = num_classes // 2
    parts = []
    for p in range(2):
        lo, hi = p * half, (p + 1) * half
        base = np.flatnonzero((data.y >= lo) & (data.y < hi))
        extra = rng.choice(len(data), size=int(round(mix * len(data))), replace=False)
        parts.append(np.concatenate([base, extra]))
    return parts


def partition_dataset(train: Dataset, test: Dataset, num_clients: int, spec: DatasetSpec,
                      seed: int) -> list[ClientData]:
    """Per-client train/test shards.

    ``two_part_noniid`` puts labels [0, K/2) in part 0 and [K/2, K) in part 1,
    adds ``mix_fraction`` of the full set (uniformly sampled) to each part,
    and splits the test set the same way. Client ``i`` belongs to part
    ``i % 2``; a part shared by several clients is divided evenly.
    """
    rng = np.random.default_rng(seed)
    if spec.partition == "iid":
        tr = np.array_split(rng.permutation(len(train)), num_clients)
        te = np.array_split(rng.permutation(len(test)), num_clients)
        return [ClientData(train.subset(a), test.subset(b), 0) for a, b in zip(tr, te)]
    if spec.partition != "two_part_noniid":
        raise ValueError(f"unknown partition {spec.partition!r}")
    if spec.num_classes % 2:
        raise ValueError("two_part_noniid needs an even number of classes")
    tr_parts = _two_part(train, spec.num_classes, spec.mix_fraction, rng)
    te_parts = _two_part(test, spec.num_classes, spec.mix_fraction, rng)
    members = [[i for i in range(num_clients) if i % 2 == p] for p in range(2)]
    shards: dict[int, ClientData] = {}
    for p in range(2):
        if not members[p]:
            continue
        tr = np.array_split(rng.permutation(tr_parts[p]), len(members[p]))
        te = np.array_split(rng.permutation(te_parts[p]), len(members[p]))
        for i, a, b in zip(members[p], tr, te):
            shards[i] = ClientData(train.subset(a), test.subset(b), p)
    return [shards[i] for i in range(num_clients)]
