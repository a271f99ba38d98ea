"""Weakly supervised segmentation from noisily tagged images.

The package turns (image, noisy tag) pairs into pixel-wise pseudo ground
truth using class-specific attention maps, curates the noisy data with a
classifier-driven filter cascade, and trains a small fully convolutional
segmenter that is then refined by an online fine-tuning loop.
"""

from noisyseg.tensor import IGNORE

__version__ = "0.1.0"

__all__ = ["IGNORE", "__version__"]
