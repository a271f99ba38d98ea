"""Minimal numpy conv-net: layers, forward tracing, gradients, SGD training."""

from noisyseg.convnet.layers import LayerSpec
from noisyseg.convnet.network import (
    CLASSIFIER,
    SEGMENTER,
    ActivationTrace,
    Network,
    build_classifier,
    build_segmenter,
    classify,
    forward,
    gradient,
    loss,
    predict_in_batches,
    segment_probs,
)
from noisyseg.convnet.train import TrainSchedule, train_classifier, train_segmenter

__all__ = [
    "CLASSIFIER",
    "SEGMENTER",
    "ActivationTrace",
    "LayerSpec",
    "Network",
    "TrainSchedule",
    "build_classifier",
    "build_segmenter",
    "classify",
    "forward",
    "gradient",
    "loss",
    "predict_in_batches",
    "segment_probs",
    "train_classifier",
    "train_segmenter",
]
