"""Array primitives shared by every stage.

Feature maps are plain ``float64`` numpy arrays of shape ``(C, H, W)``;
label images are integer arrays of shape ``(H, W)``.  Batched code paths
prepend an ``N`` axis.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

# Internal code for "ignored" pixels.  Encoded as 255 on disk.
IGNORE = -1
IGNORE_ON_DISK = 255


def as_feature_map(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"feature map must be C x H x W with all dims >= 1, got {arr.shape}")
    return arr


@lru_cache(maxsize=64)
def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) matrix performing 1-D linear interpolation.

    Output sample ``o`` sits at source coordinate ``(o + 0.5)/factor - 0.5``
    (pixel centres aligned), clamped to ``[0, n-1]``.
    """
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    t = src - lo
    mat = np.zeros((m, n))
    rows = np.arange(m)
    np.add.at(mat, (rows, lo), 1.0 - t)
    np.add.at(mat, (rows, hi), t)
    mat.setflags(write=False)
    return mat


def interp_matrices(height: int, width: int, factor: int) -> tuple[np.ndarray, np.ndarray]:
    return _interp_matrix(height, factor), _interp_matrix(width, factor)


def bilinear_upsample(fmap, factor: int) -> np.ndarray:
    """Upsample the trailing two (spatial) axes by an integer ``factor``.

    Works on ``(C, H, W)`` maps as well as batched ``(N, C, H, W)`` arrays.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor!r}")
    x = np.asarray(fmap, dtype=np.float64)
    if factor == 1:
        return x.copy()
    ry, rx = interp_matrices(x.shape[-2], x.shape[-1], int(factor))
    return ry @ x @ rx.T


def argsort_descending(scores) -> np.ndarray:
    """Indices ordering ``scores`` from largest to smallest; ties keep index order."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("argsort_descending needs a nonempty vector")
    return np.argsort(-s, kind="stable")


def minmax_normalize(fmap) -> np.ndarray:
    """Rescale each channel to [0, 1]; constant channels become all zeros."""
    x = np.asarray(fmap, dtype=np.float64)
    squeeze = x.ndim < 3
    if x.ndim == 1:
        x = x[None, None]
    elif x.ndim == 2:
        x = x[None]
    flat = x.reshape(x.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    hi = flat.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(flat)
    ok = span[:, 0] > 0
    out[ok] = (flat[ok] - lo[ok]) / span[ok]
    # guard against rounding a hair outside the unit interval
    np.clip(out, 0.0, 1.0, out=out)
    out = out.reshape(x.shape)
    if squeeze:
        return out.reshape(np.shape(fmap))
    return out
