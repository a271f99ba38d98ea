"""From attention maps to trimap pseudo ground truth, plus mIoU scoring."""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from noisyseg.errors import ConfigurationError, UsageError
from noisyseg.tensor import IGNORE

DELTA_HIGH = 0.65  # above: confident foreground
DELTA_LOW = 0.5  # at or below: background; in between: ignored

# -- superpixels -------------------------------------------------------------

def _grid_centers(h, w, count, rng):
    nx = max(1, int(round(np.sqrt(count * w / h))))
    ny = max(1, int(round(count / nx)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    step = np.sqrt(h * w / (ny * nx))
    jitter = step / 4.0
    cy = np.clip(cy.ravel() + rng.uniform(-jitter, jitter, ny * nx), 0, h - 1)
    cx = np.clip(cx.ravel() + rng.uniform(-jitter, jitter, ny * nx), 0, w - 1)
    return cy, cx, ny, nx, step


def _candidates(h, w, ny, nx):
    """For every pixel, the indices of the 3x3 block of grid centres around its cell."""
    gy = np.minimum(np.arange(h) * ny // h, ny - 1)
    gx = np.minimum(np.arange(w) * nx // w, nx - 1)
    offs = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)])
    cy = np.clip(gy[:, None, None] + offs[None, None, :, 0], 0, ny - 1)  # (h, 1, 9)
    cx = np.clip(gx[None, :, None] + offs[None, None, :, 1], 0, nx - 1)  # (1, w, 9)
    return (cy * nx + cx).reshape(h * w, 9)


def _merge_small(comp, sizes, min_size):
    """Fold components smaller than ``min_size`` into their largest 4-neighbour."""
    parent = np.arange(len(sizes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    pairs = np.concatenate([
        np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], 1),
        np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], 1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    neighbours = [[] for _ in sizes]
    for a, b in pairs:
        neighbours[a].append(b)
        neighbours[b].append(a)
    sizes = sizes.astype(np.int64).copy()
    for c in np.argsort(sizes, kind="stable"):
        root = find(c)
        if sizes[root] >= min_size:
            continue
        best, best_size = None, -1
        for nb in neighbours[root]:
            r = find(nb)
            if r != root and sizes[r] > best_size:
                best, best_size = r, sizes[r]
        if best is None:
            continue
        parent[root] = best
        sizes[best] += sizes[root]
        neighbours[best].extend(neighbours[root])
    roots = np.array([find(i) for i in range(len(sizes))])
    return roots[comp]


def _relabel(labels):
    """Renumber codes 0..S-1 in raster order of first appearance."""
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    lut = np.empty(flat.max() + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[labels]


def label_components(labels) -> tuple[np.ndarray, int]:
    """Number the 4-connected regions of equal code, ``(component map, count)``."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    right = labels[:, :-1] == labels[:, 1:]
    down = labels[:-1, :] == labels[1:, :]
    src = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    dst = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = sparse.coo_matrix((np.ones(len(src)), (src, dst)), shape=(h * w, h * w))
    n, comp = csgraph.connected_components(graph, directed=False)
    return comp.reshape(h, w).astype(np.int64), n


def enforce_connectivity(labels, min_size: int = 1):
    """Split every code into its 4-connected pieces, absorbing pieces under ``min_size`` pixels."""
    comp, n = label_components(np.asarray(labels))
    if min_size > 1 and n > 1:
        comp = _merge_small(comp, np.bincount(comp.ravel(), minlength=n), min_size)
    return _relabel(comp)


def generate_segments(image, target_count: int = 64, compactness: float = 0.3, iterations: int = 10,
                      seed: int = 0) -> np.ndarray:
    """Superpixel partition of a ``C x H x W`` image into about ``target_count`` connected segments.

    Seeded k-means on (colour, position) in the style of SLIC: centres start on a
    jittered grid and each pixel joins the nearest of the nine centres around its
    grid cell, with distance ``sqrt(d_colour^2 + (compactness * d_xy / step)^2)``.
    Pieces that end up disconnected are split off, and slivers below a quarter
    of the nominal segment area are absorbed into a neighbour.
    """
    if target_count < 1:
        raise ConfigurationError("target_count must be >= 1")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    rng = np.random.default_rng(seed)
    cy, cx, ny, nx, step = _grid_centers(h, w, target_count, rng)
    n_centers = len(cy)
    feats = img.reshape(c, -1).T  # (P, C)
    py, px = np.divmod(np.arange(h * w), w)
    cand = _candidates(h, w, ny, nx)
    iy, ix = np.round(cy).astype(int), np.round(cx).astype(int)
    ccol = img[:, iy, ix].T.copy()
    spatial_w = (compactness / step) ** 2
    rows = np.arange(h * w)
    assign = cand[:, 4]
    for _ in range(max(1, iterations)):
        d = np.zeros(cand.shape)
        for ch in range(c):
            d += (feats[:, ch, None] - ccol[:, ch][cand]) ** 2
        d += spatial_w * ((py[:, None] - cy[cand]) ** 2 + (px[:, None] - cx[cand]) ** 2)
        assign = cand[rows, np.argmin(d, axis=1)]
        counts = np.bincount(assign, minlength=n_centers)
        live = counts > 0
        for arr, vals in ((cy, py), (cx, px)):
            arr[live] = np.bincount(assign, vals, n_centers)[live] / counts[live]
        for ch in range(c):
            ccol[live, ch] = np.bincount(assign, feats[:, ch], n_centers)[live] / counts[live]
    labels = assign.reshape(h, w)
    min_size = max(1, int(h * w / max(1, target_count) / 4))
    return enforce_connectivity(labels, min_size)


def is_partition(segs) -> bool:
    """True if codes are exactly 0..S-1 and every segment is 4-connected."""
    segs = np.asarray(segs)
    codes = np.unique(segs)
    if codes[0] != 0 or codes[-1] != len(codes) - 1:
        return False
    return label_components(segs)[1] == len(codes)


# -- smoothing and trimap ----------------------------------------------------

def smooth(attention, segs) -> np.ndarray:
    """Replace each pixel by the mean attention of its segment."""
    a = np.asarray(attention, dtype=np.float64)
    s = np.asarray(segs)
    if a.shape != s.shape:
        raise UsageError(f"attention map {a.shape} and segment map {s.shape} differ in size")
    flat = s.ravel()
    sums = np.bincount(flat, weights=a.ravel())
    counts = np.bincount(flat)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return means[s]


def trimap(attention, tag: int, delta_high: float = DELTA_HIGH, delta_low: float = DELTA_LOW) -> np.ndarray:
    """Three-way labelling: ``tag`` above ``delta_high``, IGNORE in ``(delta_low, delta_high]``, else 0."""
    if not delta_high > delta_low:
        raise ConfigurationError(f"need delta_high > delta_low, got {delta_high} <= {delta_low}")
    a = np.asarray(attention, dtype=np.float64)
    out = np.zeros(a.shape, dtype=np.int64)
    out[a > delta_low] = IGNORE
    out[a > delta_high] = tag
    return out


def binarize(attention, tag: int, threshold: float) -> np.ndarray:
    """Two-way labelling used when the trimap is switched off."""
    a = np.asarray(attention, dtype=np.float64)
    return np.where(a > threshold, tag, 0).astype(np.int64)


# -- evaluation ---------------------------------------------------------------

def confusion_counts(preds, gts, class_count: int):
    """Per-class intersection and union totals over classes 0..K."""
    inter = np.zeros(class_count + 1, dtype=np.int64)
    union = np.zeros(class_count + 1, dtype=np.int64)
    if len(preds) != len(gts):
        raise UsageError("prediction and ground-truth lists differ in length")
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise UsageError(f"mask shapes differ: {p.shape} vs {g.shape}")
        keep = g != IGNORE
        p, g = p[keep], g[keep]
        for c in range(class_count + 1):
            pc, gc = p == c, g == c
            inter[c] += np.count_nonzero(pc & gc)
            union[c] += np.count_nonzero(pc | gc)
    return inter, union


def mean_iou(preds, gts, class_count: int):
    """Dataset-level mIoU over classes 0..K present in predictions or ground truth.

    Returns ``(miou, per_class)``; absent classes are ``nan`` in ``per_class``.
    """
    inter, union = confusion_counts(preds, gts, class_count)
    per_class = np.full(class_count + 1, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return miou, per_class
