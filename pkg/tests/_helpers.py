"""Shared oracles and generators for the test-suite."""

from __future__ import annotations

import numpy as np

from splitbench import tensor as T
from splitbench.layers import (ConvTranspose2d, Conv2d, Dense, Flatten, MaxPool2d, ReLU, Reshape, Sigmoid,
                               Upsample2d)
from splitbench.model import SequentialModel
from splitbench.tensor import Tensor


def random_model(rng: np.random.Generator, num_classes: int = 3) -> SequentialModel:
    """A small random stack that exercises every layer kind somewhere across draws."""
    c, h = int(rng.integers(1, 3)), int(rng.choice([4, 6, 8]))
    layers = []
    shape = (c, h, h)
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "convT", "relu", "sigmoid", "pool", "up"])
        cin, hh = shape[0], shape[1]
        if kind == "conv" and hh >= 3:
            k = int(rng.choice([1, 2, 3]))
            s = int(rng.choice([1, 2]))
            p = int(rng.integers(0, 2))
            layer = Conv2d(cin, int(rng.integers(1, 4)), k, s, p, bias=bool(rng.integers(0, 2)))
        elif kind == "convT" and hh <= 8:
            layer = ConvTranspose2d(cin, int(rng.integers(1, 4)), int(rng.choice([2, 3])), int(rng.choice([1, 2])),
                                    0, 0, bias=bool(rng.integers(0, 2)))
        elif kind == "pool" and hh >= 2 and hh % 2 == 0:
            layer = MaxPool2d(2)
        elif kind == "up" and hh <= 6:
            layer = Upsample2d(2)
        elif kind == "sigmoid":
            layer = Sigmoid()
        else:
            layer = ReLU()
        layers.append(layer)
        shape = layer.output_shape(shape)
    flat = int(np.prod(shape))
    if rng.integers(0, 2):
        layers += [Flatten(), Reshape(shape), Flatten()]
    else:
        layers.append(Flatten())
    width = int(rng.integers(2, 6))
    layers += [Dense(flat, width, bias=bool(rng.integers(0, 2))), ReLU(), Dense(width, num_classes)]
    return SequentialModel(layers, (c, h, h), "random")


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error with a small absolute floor for all-but-zero gradients."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def finite_difference(fn, arr: np.ndarray, idx, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` at flat indices ``idx`` (arr edited in place)."""
    out = np.empty(len(idx))
    flat = arr.reshape(-1)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[k] = (up - down) / (2 * step)
    return out


def gradcheck(loss_fn, tensors: list[Tensor], rng: np.random.Generator, max_coords: int = 12,
              step: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    with T.no_grad():
        for t in tensors:
            n = t.size
            idx = rng.choice(n, size=min(n, max_coords), replace=False)
            numeric = finite_difference(lambda: loss_fn().item(), t.data, idx, step)
            analytic = (np.zeros(n) if t.grad is None else t.grad.reshape(-1))[idx]
            worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def dcor_bruteforce(x: np.ndarray, z: np.ndarray) -> float:
    """Explicit-loop distance correlation (double-centred distance matrices)."""
    n = x.shape[0]
    x = x.reshape(n, -1)
    z = z.reshape(n, -1)

    def centred(v):
        d = [[float(np.sqrt(sum((v[i][k] - v[j][k]) ** 2 for k in range(v.shape[1])))) for j in range(n)]
             for i in range(n)]
        row = [sum(d[i]) / n for i in range(n)]
        col = [sum(d[i][j] for i in range(n)) / n for j in range(n)]
        grand = sum(row) / n
        return [[d[i][j] - row[i] - col[j] + grand for j in range(n)] for i in range(n)]

    a, b = centred(x), centred(z)
    cov = sum(a[i][j] * b[i][j] for i in range(n) for j in range(n)) / n ** 2
    vx = sum(a[i][j] ** 2 for i in range(n) for j in range(n)) / n ** 2
    vz = sum(b[i][j] ** 2 for i in range(n) for j in range(n)) / n ** 2
    if vx * vz <= 0 or cov <= 0:
        return 0.0
    return float(np.sqrt(cov) / (vx * vz) ** 0.25)


def kink_margin(model: SequentialModel, x: np.ndarray) -> float:
    """Smallest distance of any ReLU input from 0 or any max-pool window from a (breakable) tie.

    Central differences are only a valid oracle when no perturbation can
    cross such a point.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    from splitbench.layers import _pair

    margin = np.inf
    h = Tensor(x)
    with T.no_grad():
        for layer in model.layers:
            if layer.kind == "relu":
                mags = np.abs(h.data)
                mags = mags[mags > 0]  # exact zeros are outputs of an earlier ReLU and stay put
                if mags.size:
                    margin = min(margin, float(mags.min()))
            elif layer.kind == "maxpool2d":
                kh, kw = _pair(layer.kernel)
                sh, sw = (kh, kw) if layer.stride is None else _pair(layer.stride)
                win = sliding_window_view(h.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
                flat = np.sort(win.reshape(win.shape[:4] + (-1,)), axis=-1)
                gaps = flat[..., -1] - flat[..., -2] if flat.shape[-1] > 1 else np.array([])
                # exact ties come from upsampled copies or dead ReLUs and move together under perturbation
                gaps = gaps[gaps > 0]
                if gaps.size:
                    margin = min(margin, float(gaps.min()))
            h = layer.forward(h)
    return margin
