"""SGD-with-momentum training for classifier and segmenter heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from noisyseg.convnet.network import CLASSIFIER, SEGMENTER, Network, gradient
from noisyseg.errors import DivergenceError, UsageError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    iterations: int = 2000
    weight_decay: float = 0.0
    seed: int = 0


def _materialize(data):
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    pairs = list(data)
    if not pairs:
        return None, None
    return np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs]), np.stack([np.asarray(p[1]) for p in pairs])


def _batches(n, schedule):
    """Yield index batches of shuffled epochs, ``schedule.iterations`` in total."""
    rng = np.random.default_rng(schedule.seed)
    bs = min(schedule.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for _ in range(schedule.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + bs]
        pos += bs


def sgd_train(net: Network, images, labels, schedule: TrainSchedule, progress_every: int = 0) -> Network:
    """Return a trained copy of ``net``.

    Each step uses the summed gradient divided by the number of contributing
    samples (images, or labelled pixels for segmenters).
    """
    net = net.copy()
    if images is None or len(images) == 0:
        return net
    params = net.params
    velocity = [np.zeros_like(p) for p in params]
    lr, mom, wd = schedule.learning_rate, schedule.momentum, schedule.weight_decay
    for step, idx in enumerate(_batches(len(images), schedule)):
        total, grads, count = gradient(net, images[idx], labels[idx])
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}")
        if count == 0:
            continue
        for p, v, g in zip(params, velocity, grads):
            step_dir = g / count
            if wd:
                step_dir = step_dir + wd * p
            v *= mom
            v -= lr * step_dir
            p += v
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.4f", step, total / count)
    return net


def train_classifier(net: Network, data, schedule: TrainSchedule = TrainSchedule(), **kw) -> Network:
    """Train on ``(image, tag)`` pairs, tags in 1..K.  ``data`` may also be an ``(images, tags)`` array tuple."""
    if net.head != CLASSIFIER:
        raise UsageError("train_classifier needs a classifier-headed network")
    images, labels = _materialize(data)
    return sgd_train(net, images, labels, schedule, **kw)


def train_segmenter(net: Network, data, schedule: TrainSchedule = TrainSchedule(), **kw) -> Network:
    """Train on ``(image, mask)`` pairs with masks over {0..K, IGNORE}."""
    if net.head != SEGMENTER:
        raise UsageError("train_segmenter needs a segmenter-headed network")
    images, labels = _materialize(data)
    return sgd_train(net, images, labels, schedule, **kw)
