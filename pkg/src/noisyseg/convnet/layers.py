"""Layer kernels for the minimal conv-net engine.

Kernels work on batched channel-major arrays: ``(C, N, H, W)`` for spatial
maps and ``(N, D)`` for vectors.  Channel-major keeps every im2col copy a
long contiguous run.  The network converts to and from the public
``N x C x H x W`` layout at its boundary.  ``*_forward`` returns the
output plus whatever cache its ``*_backward`` twin needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from noisyseg.tensor import interp_matrices

CONV = "convolution"
RELU = "relu"
MAX_POOL = "max-pool"
AVG_POOL = "average-pool"
GAP = "global-average-pool"
FC = "fully-connected"
PIXEL_SOFTMAX = "per-pixel-softmax"
SOFTMAX = "softmax"
UPSAMPLE = "bilinear-upsample-to-input"

KINDS = (CONV, RELU, MAX_POOL, AVG_POOL, GAP, FC, PIXEL_SOFTMAX, SOFTMAX, UPSAMPLE)
PARAMETRIC = (CONV, FC)


@dataclass
class LayerSpec:
    """One layer of a :class:`~noisyseg.convnet.network.Network`.

    Convolution weights are ``(out, in, k, k)``; fully-connected weights are
    ``(out, in)``.  ``bias`` is ``None`` for bias-free layers.  Pooling
    layers use non-overlapping windows (``stride == kernel``).
    """

    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.kind in PARAMETRIC and self.weights is None:
            raise ValueError(f"{self.kind} layer needs weights")
        if self.kind == CONV and self.weights.shape[2:] != (self.kernel, self.kernel):
            raise ValueError("convolution weight shape disagrees with kernel size")
        if self.kind in (MAX_POOL, AVG_POOL) and self.stride != self.kernel:
            raise ValueError("pooling windows must not overlap (stride == kernel)")
        if self.bias is not None and self.weights is not None and self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal output channel count")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        if self.weights is not None:
            out.append(self.weights)
        if self.bias is not None:
            out.append(self.bias)
        return out

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            kind=self.kind,
            kernel=self.kernel,
            stride=self.stride,
            padding=self.padding,
            weights=None if self.weights is None else self.weights.copy(),
            bias=None if self.bias is None else self.bias.copy(),
            name=self.name,
            meta=dict(self.meta),
        )


# -- convolution ----------------------------------------------------------

def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _wmat(weights):
    # (out, in, k, k) -> (out, k*k*in), matching the im2col row order
    return weights.transpose(0, 2, 3, 1).reshape(weights.shape[0], -1)


def im2col(x, k, s, p):
    """Patches of ``x`` as a ``(k*k*C, N*Ho*Wo)`` matrix, rows ordered (dy, dx, c)."""
    c, n, h, w = x.shape
    xp = _pad(x, p)
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    cols = np.empty((k, k, c, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(k * k * c, n * ho * wo), ho, wo


def col2im(dcols, x_shape, k, s, p, ho, wo):
    c, n, h, w = x_shape
    d = dcols.reshape(k, k, c, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[i, j]
    if p:
        return dxp[:, :, p:p + h, p:p + w]
    return dxp


def conv_forward(x, weights, bias, stride=1, padding=0):
    k = weights.shape[2]
    cols, ho, wo = im2col(x, k, stride, padding)
    y = _wmat(weights) @ cols
    if bias is not None:
        y += bias[:, None]
    return y.reshape(weights.shape[0], x.shape[1], ho, wo), cols


def conv_backward_input(dy, x_shape, weights, stride=1, padding=0):
    """Adjoint of the convolution with respect to its input (a transposed conv)."""
    out_c, n, ho, wo = dy.shape
    dcols = _wmat(weights).T @ dy.reshape(out_c, -1)
    return col2im(dcols, x_shape, weights.shape[2], stride, padding, ho, wo)


def conv_backward(dy, x_shape, cols, weights, stride=1, padding=0, with_bias=True, need_input=True):
    out_c, _, k, _ = weights.shape
    dflat = dy.reshape(out_c, -1)
    dw = (dflat @ cols.T).reshape(out_c, k, k, -1).transpose(0, 3, 1, 2)
    db = dflat.sum(axis=1) if with_bias else None
    dx = conv_backward_input(dy, x_shape, weights, stride, padding) if need_input else None
    return dx, dw, db


# -- pooling --------------------------------------------------------------

def _check_tiles(x, k):
    h, w = x.shape[2:]
    if h % k or w % k:
        raise ValueError(f"pooling window {k} does not tile a {h}x{w} map")


def _taps(x, k):
    return [x[:, :, i::k, j::k] for i in range(k) for j in range(k)]


def maxpool_forward(x, k):
    _check_tiles(x, k)
    taps = _taps(x, k)
    y = taps[0].copy()
    for t in taps[1:]:
        np.maximum(y, t, out=y)
    return y


def _upsample_nearest(y, k):
    return np.repeat(np.repeat(y, k, axis=-2), k, axis=-1)


def maxpool_winners(x, k, y=None):
    """Indicator of each window's maximal entries, normalised to sum to 1 per window (ties split)."""
    if y is None:
        y = maxpool_forward(x, k)
    hit = (x == _upsample_nearest(y, k)).astype(np.float64)
    count = sum(_taps(hit, k))
    return hit / _upsample_nearest(count, k)


def maxpool_backward(dy, x, y, k):
    # Tied maxima all receive the window gradient; ties among positive
    # activations have measure zero, and tied zeros are masked by the ReLU below.
    return _upsample_nearest(dy, k) * (x == _upsample_nearest(y, k))


def avgpool_forward(x, k):
    _check_tiles(x, k)
    return sum(_taps(x, k)) / (k * k)


def avgpool_backward(dy, k):
    return _upsample_nearest(dy, k) / (k * k)


# -- heads ----------------------------------------------------------------

def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def upsample_forward(x, factor):
    """Bilinear upsampling of the two trailing axes."""
    ry, rx = interp_matrices(x.shape[-2], x.shape[-1], factor)
    return ry @ x @ rx.T


def upsample_backward(dy, in_hw, factor):
    ry, rx = interp_matrices(in_hw[0], in_hw[1], factor)
    return ry.T @ dy @ rx
