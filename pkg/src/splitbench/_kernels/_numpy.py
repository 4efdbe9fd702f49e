"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba.py`` with the same
signature. The numpy versions are the fallback path and the oracle the
numba path is benchmarked and tested against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw):
    """(N, C, H, W) -> (N, C*kh*kw, OH*OW). Input must already be padded."""
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # win: (N, C, OH, OW, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an (N, C, H, W) canvas."""
    n = cols.shape[0]
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((n, c, h, w))
    blocks = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += blocks[:, :, i, j]
    return out


def maxpool_forward(x, kh, kw, sh, sw):
    """Returns pooled output and the flat (per-channel-plane) argmax indices."""
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, oh, ow, kh * kw)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    ki, kj = np.divmod(local, kw)
    rows = np.arange(oh)[:, None] * sh + ki
    cols = np.arange(ow)[None, :] * sw + kj
    idx = rows * w + cols
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(grad, idx, h, w):
    n, c, oh, ow = grad.shape
    out = np.zeros((n * c, h * w))
    g = grad.reshape(n * c, oh * ow)
    ix = idx.reshape(n * c, oh * ow)
    rows = np.repeat(np.arange(n * c), oh * ow)
    np.add.at(out, (rows, ix.ravel()), g.ravel())
    return out.reshape(n, c, h, w)


def pairwise_distances(z):
    """Euclidean distance matrix of the rows of a 2-d array."""
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def pairwise_distances_backward(z, dist, grad):
    """Gradient of sum(grad * dist) w.r.t. z; zero where two rows coincide."""
    sym = grad + grad.T
    safe = np.where(dist > 0.0, dist, 1.0)
    coef = np.where(dist > 0.0, sym / safe, 0.0)
    return coef.sum(axis=1)[:, None] * z - coef @ z
