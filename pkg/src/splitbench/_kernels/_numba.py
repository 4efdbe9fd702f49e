"""numba-compiled twins of the kernels in ``_numpy.py``."""

import numba as nb
import numpy as np


@nb.njit(cache=True)
def im2col(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    cols = np.empty((n, c * kh * kw, oh * ow))
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for p in range(oh):
                        for q in range(ow):
                            cols[b, row, p * ow + q] = x[b, ch, p * sh + i, q * sw + j]
    return cols


@nb.njit(cache=True)
def col2im(cols, c, h, w, kh, kw, sh, sw):
    n = cols.shape[0]
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((n, c, h, w))
    # same (i, j) accumulation order as the numpy path keeps sums bit-equal
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for p in range(oh):
                        for q in range(ow):
                            out[b, ch, p * sh + i, q * sw + j] += cols[b, row, p * ow + q]
    return out


@nb.njit(cache=True)
def maxpool_forward(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.empty((n, c, oh, ow))
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for p in range(oh):
                for q in range(ow):
                    best = -np.inf
                    arg = 0
                    # row-major scan with strict '>' picks the first max, like argmax
                    for i in range(kh):
                        for j in range(kw):
                            r = p * sh + i
                            col = q * sw + j
                            v = x[b, ch, r, col]
                            if v > best:
                                best = v
                                arg = r * w + col
                    out[b, ch, p, q] = best
                    idx[b, ch, p, q] = arg
    return out, idx


@nb.njit(cache=True)
def maxpool_backward(grad, idx, h, w):
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for p in range(oh):
                for q in range(ow):
                    flat = idx[b, ch, p, q]
                    out[b, ch, flat // w, flat % w] += grad[b, ch, p, q]
    return out


@nb.njit(cache=True)
def pairwise_distances(z):
    n, m = z.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(m):
                d = z[i, k] - z[j, k]
                acc += d * d
            out[i, j] = np.sqrt(acc)
    return out


@nb.njit(cache=True)
def pairwise_distances_backward(z, dist, grad):
    n, m = z.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(n):
            d = dist[i, j]
            if d > 0.0:
                coef = (grad[i, j] + grad[j, i]) / d
                for k in range(m):
                    out[i, k] += coef * (z[i, k] - z[j, k])
    return out
