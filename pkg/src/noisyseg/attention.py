"""Class-specific attention maps.

Three ingredients, all computed from one classifier forward pass:

* forward scores: the FC-weighted sum of the pre-pooling feature channels
  (class activation mapping), at the coarse resolution of the last block;
* backward excitation maps: a one-hot class distribution at the softmax is
  pushed down the network, each neuron handing its probability mass to its
  inputs in proportion to their positive weight x activation products;
* fusion: the forward map plus the product of two excitation maps taken at
  a shallow and a deeper tap, all upsampled to the input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from noisyseg.convnet import layers as L
from noisyseg.convnet.network import CLASSIFIER, Network, forward
from noisyseg.errors import ConfigurationError, UsageError
from noisyseg.tensor import bilinear_upsample, minmax_normalize

# fusion weights for the forward term and the backward product
DEFAULT_LAMBDA_FORWARD = 1.0
DEFAULT_LAMBDA_BACKWARD = 1.0


def _class_index(k, n, class_count):
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    if np.any((ks < 1) | (ks > class_count)):
        raise UsageError(f"class must lie in 1..{class_count}")
    return ks - 1


def _gap_index(trace):
    for i in range(len(trace.kinds) - 1, -1, -1):
        if trace.kinds[i] == L.GAP:
            return i
    raise UsageError("trace has no global-average-pool entry (missing pre-GAP features)")


def forward_attention(trace, fc_weights, k):
    """Forward attention scores ``F^k(x, y) = sum_c w[k, c] * f^c(x, y)``.

    ``fc_weights`` is the ``(K, C)`` bias-free FC matrix; ``k`` is a class in
    1..K (or one class per image for a batched trace).  The result lives on
    the grid of the features entering global pooling and may be negative.
    """
    feats = trace.layer_input(_gap_index(trace))  # (C, N, X, Y)
    w = np.asarray(fc_weights, dtype=np.float64)
    if w.shape[1] != feats.shape[0]:
        raise UsageError("FC weights do not match the pre-pooling channel count")
    rows = w[_class_index(k, feats.shape[1], w.shape[0])]  # (N, C)
    out = np.einsum("nc,cnxy->nxy", rows, feats)
    return out if trace.batched else out[0]


def _children_mass(layer: L.LayerSpec, x, y, p_out):
    """Distribute parent probabilities ``p_out`` over the layer input ``x``.

    ``y`` is the recorded layer output.  Parents whose positive products all
    vanish keep their mass (it is dropped).
    """
    k = layer.kind
    if k in (L.SOFTMAX, L.RELU):
        return p_out
    if k in (L.CONV, L.FC, L.GAP, L.AVG_POOL) and np.any(x < 0):
        raise UsageError(f"excitation needs nonnegative inputs to the {k} layer")
    if k == L.FC:
        wp = np.maximum(layer.weights, 0.0)
        s = x @ wp.T
        ratio = np.divide(p_out, s, out=np.zeros_like(s), where=s > 0)
        return x * (ratio @ wp)
    if k == L.CONV:
        wp = np.maximum(layer.weights, 0.0)
        s, _ = L.conv_forward(x, wp, None, layer.stride, layer.padding)
        ratio = np.divide(p_out, s, out=np.zeros_like(s), where=s > 0)
        return x * L.conv_backward_input(ratio, x.shape, wp, layer.stride, layer.padding)
    if k == L.GAP:
        s = x.sum(axis=(2, 3)).T  # the 1/(XY) weight cancels in the ratio
        ratio = np.divide(p_out, s, out=np.zeros_like(s), where=s > 0)
        return x * ratio.T[:, :, None, None]
    if k == L.AVG_POOL:
        kk = layer.kernel
        s = L.avgpool_forward(x, kk)
        ratio = np.divide(p_out, s, out=np.zeros_like(s), where=s > 0)
        return x * L.avgpool_backward(ratio, kk)
    if k == L.MAX_POOL:
        kk = layer.kernel
        return L.maxpool_winners(x, kk, y) * np.repeat(np.repeat(p_out, kk, axis=-2), kk, axis=-1)
    raise UsageError(f"excitation cannot pass through a {k} layer")


@dataclass
class ExcitationState:
    """Probability maps produced while propagating top-down.

    ``maps[i]`` is the distribution over the outputs of layer ``i`` (the input
    image is index -1, stored under ``input``), channel-major like the trace.
    """

    maps: dict
    start: int

    def layer_sums(self) -> dict:
        """Total mass per propagated layer, per image: ``{layer: (N,)}``."""
        out = {}
        for i, m in self.maps.items():
            out[i] = m.sum(axis=1) if m.ndim == 2 else m.sum(axis=(0, 2, 3))
        return out


def excitation_states(net: Network, trace, k, stop: int = -1) -> ExcitationState:
    """Propagate a one-hot distribution at class ``k`` from the top layer down to layer ``stop``.

    ``stop = -1`` continues to the input image.
    """
    if net.head != CLASSIFIER:
        raise UsageError("excitation needs a classifier-headed network")
    top = len(net.layers) - 1
    if len(trace.raw) != len(net.layers):
        raise UsageError("trace does not belong to this network")
    if stop > top or stop < -1:
        raise UsageError(f"tap {stop} lies outside the propagation range [-1, {top}]")
    n = trace.raw[-1].shape[0]
    p = np.zeros_like(trace.raw[-1])
    p[np.arange(n), _class_index(k, n, net.class_count)] = 1.0
    maps = {top: p}
    for i in range(top, stop, -1):
        p = _children_mass(net.layers[i], trace.layer_input(i), trace.raw[i], p)
        maps[i - 1] = p
    return ExcitationState(maps, top)


def excitation_backward(net: Network, trace, k, tap: int):
    """Backward excitation map at layer ``tap``, summed over channels.

    Returns an ``H x W`` map on the tap layer's grid (``N x H x W`` for a
    batched trace).
    """
    state = excitation_states(net, trace, k, stop=tap)
    p = state.maps[tap]
    if p.ndim != 4:
        raise UsageError(f"tap {tap} is not a spatial layer")
    b = p.sum(axis=0)
    return b if trace.batched else b[0]


def fuse(forward_map, b_shallow, b_deep, lambda1=DEFAULT_LAMBDA_FORWARD, lambda2=DEFAULT_LAMBDA_BACKWARD,
         factors=(8, 2, 4)):
    """Fused attention ``norm(l1 * F + l2 * Bs * Bd)`` with every term upsampled and min-max normalised.

    Maps are ``H x W`` or batched ``N x H x W``; normalisation is per image.
    """
    maps = []
    for m, f in zip((forward_map, b_shallow, b_deep), factors):
        m = np.asarray(m, dtype=np.float64)
        maps.append(bilinear_upsample(m, f))
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ConfigurationError(f"upsampled attention maps disagree in size: {sorted(shapes)}")
    f_hat, bs_hat, bd_hat = (minmax_normalize(m) for m in maps)
    return minmax_normalize(lambda1 * f_hat + lambda2 * (bs_hat * bd_hat))


@dataclass
class AttentionResult:
    """Coarse maps and their fusion for a batch of images (all ``N x H x W``)."""

    forward: np.ndarray
    shallow: np.ndarray
    deep: np.ndarray
    fused: np.ndarray
    factors: tuple[int, int, int]

    def upsampled(self, which: str) -> np.ndarray:
        idx = {"forward": 0, "shallow": 1, "deep": 2}[which]
        return minmax_normalize(bilinear_upsample(getattr(self, which), self.factors[idx]))

    def backward_product(self) -> np.ndarray:
        return minmax_normalize(self.upsampled("shallow") * self.upsampled("deep"))


def tap_factors(net: Network) -> tuple[int, int, int]:
    gap = [i for i, layer in enumerate(net.layers) if layer.kind == L.GAP][-1]
    return (net.stride_at(gap - 1), net.stride_at(net.tap_points["shallow"]),
            net.stride_at(net.tap_points["deep"]))


def attention_maps(net: Network, images, tags, lambda1=DEFAULT_LAMBDA_FORWARD,
                   lambda2=DEFAULT_LAMBDA_BACKWARD, batch_size: int = 64) -> AttentionResult:
    """Forward, backward and fused attention for ``images`` (``N x C x H x W``) under their ``tags``."""
    images = np.asarray(images, dtype=np.float64)
    tags = np.broadcast_to(np.asarray(tags), (len(images),))
    fc = [layer for layer in net.layers if layer.kind == L.FC][-1].weights
    shallow, deep = net.tap_points["shallow"], net.tap_points["deep"]
    fw, bs, bd = [], [], []
    for lo in range(0, len(images), batch_size):
        x = images[lo:lo + batch_size]
        t = tags[lo:lo + batch_size]
        trace = forward(net, x)
        fw.append(forward_attention(trace, fc, t))
        state = excitation_states(net, trace, t, stop=shallow)
        bs.append(state.maps[shallow].sum(axis=0))
        bd.append(state.maps[deep].sum(axis=0))
    factors = tap_factors(net)
    fw, bs, bd = np.concatenate(fw), np.concatenate(bs), np.concatenate(bd)
    fused = fuse(fw, bs, bd, lambda1, lambda2, factors)
    return AttentionResult(fw, bs, bd, fused, factors)
