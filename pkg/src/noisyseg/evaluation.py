"""Evaluation against true masks.

This is the only module that resolves or opens true-mask files; training
and curation code never receives truth paths.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from noisyseg.convnet.network import Network, predict_in_batches
from noisyseg.data.imageio import load_mask
from noisyseg.data.manifest import Manifest, Record
from noisyseg.pseudolabel import mean_iou


def truth_path(manifest: Manifest, record: Record) -> Path | None:
    rel = manifest._truth.get(record.image)
    return None if rel is None else manifest.root / rel


def load_truths(manifest: Manifest) -> list[np.ndarray]:
    out = []
    for r in manifest.records:
        p = truth_path(manifest, r)
        if p is None:
            raise ValueError(f"no true mask recorded for {r.image}")
        out.append(load_mask(p))
    return out


def tag_correct(manifest: Manifest) -> np.ndarray:
    """Per record: does the tagged class appear in the true mask?"""
    return np.array([r.tag in set(np.unique(m).tolist()) for r, m in zip(manifest.records, load_truths(manifest))])


def tag_purity(manifest: Manifest) -> float | None:
    if not manifest.records or not all(truth_path(manifest, r) for r in manifest.records):
        return None
    return float(tag_correct(manifest).mean())


def predict_masks(net: Network, images, batch_size: int = 64) -> np.ndarray:
    """Per-pixel argmax labels (0..K) of a segmenter."""
    return predict_in_batches(net, images, batch_size).argmax(axis=1)


def evaluate_segmenter(net: Network, manifest: Manifest, images=None):
    """``(miou, per_class)`` of ``net`` on ``manifest`` against its true masks."""
    if images is None:
        images = manifest.load_images()
    preds = predict_masks(net, images)
    return mean_iou(list(preds), load_truths(manifest), net.class_count)


def evaluate_masks(masks, manifest: Manifest, class_count: int):
    return mean_iou(list(masks), load_truths(manifest), class_count)
