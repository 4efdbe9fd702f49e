"""Dense float64 tensors with a reverse-mode tape.

A tape is recorded only when at least one input of an operation requires
gradients. :meth:`Tensor.backward` walks that tape in reverse topological
order and accumulates ``grad`` on every tensor that requires it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeError(RuntimeError):
    """Raised when backward is requested on something without a tape."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise TapeError("backward() called on a tensor that is not on a tape")
        if grad is None:
            if self.data.ndim != 0:
                raise TapeError(f"backward() without a seed needs a 0-d tensor, got shape {self.shape}")
            grad = np.ones((), dtype=np.float64)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(_as_array(data), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # subgradient at exactly 0 is 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions and shape --------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- layer primitives ----------------------------------------------------
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = x.data @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=1, padding=0) -> Tensor:
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh, ow = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    cols = _kernels.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, oh, ow)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward(g):
        gmat = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,nkp->ok", gmat, cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            gx = _kernels.col2im(np.ascontiguousarray(dcols), c, hp, wp, kh, kw, sh, sw)
            gx = gx[:, :, ph:ph + h, pw:pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=1, padding=0,
                     output_padding=0) -> Tensor:
    """Adjoint of conv2d in its input. Weight is stored as (in, out, kh, kw)."""
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    hc, wc = (h - 1) * sh + kh + oph, (w - 1) * sw + kw + opw
    oh, ow = hc - 2 * ph, wc - 2 * pw
    wmat = weight.data.reshape(c, o * kh * kw)
    xmat = x.data.reshape(n, c, h * w)
    cols = np.matmul(wmat.T, xmat)
    canvas = _kernels.col2im(np.ascontiguousarray(cols), o, hc, wc, kh, kw, sh, sw)
    out = canvas[:, :, ph:ph + oh, pw:pw + ow]
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, o, hc, wc))
        gfull[:, :, ph:ph + oh, pw:pw + ow] = g
        # the conv footprint only covers the first (h-1)*s+k rows/cols
        gcols = _kernels.im2col(gfull[:, :, :hc - oph, :wc - opw].copy(), kh, kw, sh, sw)
        gx = np.matmul(wmat, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("ncp,nkp->ck", xmat, gcols).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, parents, backward)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = (kh, kw) if stride is None else _pair(stride)
    h, w = x.shape[2], x.shape[3]
    out, idx = _kernels.maxpool_forward(np.ascontiguousarray(x.data), kh, kw, sh, sw)
    return _make(out, (x,), lambda g: (_kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w),))


def upsample_nearest2d(x: Tensor, scale) -> Tensor:
    sh, sw = (scale, scale) if isinstance(scale, (int, np.integer)) else (int(scale[0]), int(scale[1]))
    out = x.data.repeat(sh, axis=2).repeat(sw, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, sh, w, sw).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def pairwise_distance(z: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-d tensor."""
    zd = np.ascontiguousarray(z.data)
    dist = _kernels.pairwise_distances(zd)
    return _make(dist, (z,), lambda g: (_kernels.pairwise_distances_backward(zd, dist, np.ascontiguousarray(g)),))


# -- losses --------------------------------------------------------------
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("cross_entropy needs integer labels")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), backward)


def mse(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else _as_array(target)
    if target.shape != pred.shape:
        raise ValueError(f"mse target shape {target.shape} != prediction shape {pred.shape}")
    diff = pred.data - target
    return _make(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / diff.size,))


def distance_correlation(x, z) -> Tensor:
    """Sample distance correlation between two batches, differentiable in both.

    Each sample is flattened. Distance matrices are double-centered; the
    squared covariance is the mean of their elementwise product and the
    correlation is ``dCov / sqrt(dVar_x * dVar_z)``. Returns 0 when either
    distance variance vanishes.
    """
    x, z = _wrap(x), _wrap(z)
    n = x.shape[0]
    if n < 2 or z.shape[0] != n:
        raise ValueError(f"distance_correlation needs matching batch size >= 2, got {x.shape[0]} and {z.shape[0]}")
    a = _double_center(pairwise_distance(reshape(x, (n, -1))))
    b = _double_center(pairwise_distance(reshape(z, (n, -1))))
    dcov2 = tmean(a * b)
    dvar_x2 = tmean(a * a)
    dvar_z2 = tmean(b * b)
    denom2 = dvar_x2.data * dvar_z2.data
    if denom2 <= 0.0 or dcov2.data <= 0.0:
        # degenerate: keep the result on the tape with a zero gradient
        return tsum(x) * 0.0 + tsum(z) * 0.0
    return sqrt(dcov2) / power(dvar_x2 * dvar_z2, 0.25)


def _double_center(d: Tensor) -> Tensor:
    return d - tmean(d, axis=0, keepdims=True) - tmean(d, axis=1, keepdims=True) + tmean(d)
