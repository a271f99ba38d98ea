"""Network container, builders, forward tracing, and analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from noisyseg.convnet import layers as L
from noisyseg.convnet.layers import LayerSpec
from noisyseg.errors import ConfigurationError, UsageError
from noisyseg.tensor import IGNORE

CLASSIFIER = "classifier"
SEGMENTER = "segmenter"


@dataclass
class Network:
    layers: list[LayerSpec]
    head: str
    class_count: int
    in_channels: int
    tap_points: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        kinds = [layer.kind for layer in self.layers]
        if self.head == CLASSIFIER:
            if kinds[-3:] != [L.GAP, L.FC, L.SOFTMAX] and kinds[-2:] != [L.FC, L.SOFTMAX]:
                raise ConfigurationError("classifier must end with global-average-pool, fully-connected, softmax")
            fc = self.layers[kinds.index(L.FC, max(0, len(kinds) - 3))]
            if fc.bias is not None:
                raise ConfigurationError("classifier FC layer must be bias-free")
            if fc.weights.shape[0] != self.class_count:
                raise ConfigurationError("FC output width must equal class_count")
        elif self.head == SEGMENTER:
            if kinds[-1] != L.PIXEL_SOFTMAX:
                raise ConfigurationError("segmenter must end with per-pixel-softmax")
            last_conv = [layer for layer in self.layers if layer.kind == L.CONV][-1]
            if last_conv.weights.shape[0] != self.class_count + 1:
                raise ConfigurationError("segmenter output must have K+1 channels")
        else:
            raise ConfigurationError(f"unknown head {self.head!r}")

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> "Network":
        return Network(
            layers=[layer.copy() for layer in self.layers],
            head=self.head,
            class_count=self.class_count,
            in_channels=self.in_channels,
            tap_points=dict(self.tap_points),
        )

    def stride_at(self, index: int) -> int:
        """Cumulative spatial downsampling after layer ``index``."""
        s = 1
        for layer in self.layers[: index + 1]:
            if layer.kind in (L.CONV, L.MAX_POOL, L.AVG_POOL):
                s *= layer.stride
        return s


def to_public(a):
    """Channel-major internal array -> ``N x C x H x W`` view (vectors unchanged)."""
    return a.transpose(1, 0, 2, 3) if a.ndim == 4 else a


@dataclass
class ActivationTrace:
    """Per-layer outputs of one forward pass.

    ``outputs[i]`` is the output of ``net.layers[i]`` in ``N x C x H x W``
    layout (a view of the channel-major array kept in ``raw``).  Arrays always
    carry a leading batch axis; ``batched`` records whether the caller passed
    one.
    """

    input: np.ndarray
    raw: list[np.ndarray]
    batched: bool
    raw_input: np.ndarray | None = field(default=None, repr=False)
    caches: list = field(default_factory=list, repr=False)
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.outputs = [to_public(a) for a in self.raw]

    def __len__(self):
        return len(self.outputs)

    def __getitem__(self, i):
        return self.outputs[i]

    def layer_input(self, i: int) -> np.ndarray:
        """Channel-major input of layer ``i``."""
        return self.raw_input if i == 0 else self.raw[i - 1]

    def _unbatch(self, arr):
        return arr if self.batched else arr[0]

    @property
    def probs(self):
        return self._unbatch(self.outputs[-1])

    @property
    def logits(self):
        return self._unbatch(self.outputs[-2])


# -- builders --------------------------------------------------------------

def glorot(rng, shape):
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def conv_layer(rng, c_in, c_out, k=3, stride=1, bias=True, name=""):
    return LayerSpec(
        L.CONV, kernel=k, stride=stride, padding=k // 2,
        weights=glorot(rng, (c_out, c_in, k, k)),
        bias=np.zeros(c_out) if bias else None, name=name,
    )


def trunk_layers(rng, in_channels, widths, pool=2):
    out = []
    c = in_channels
    for b, w in enumerate(widths, start=1):
        out.append(conv_layer(rng, c, w, name=f"conv{b}"))
        out.append(LayerSpec(L.RELU, name=f"relu{b}"))
        out.append(LayerSpec(L.MAX_POOL, kernel=pool, stride=pool, name=f"pool{b}"))
        c = w
    return out


def build_classifier(class_count: int, in_channels: int = 3, widths=(8, 16, 32), seed: int = 0) -> Network:
    """Reference classifier: [conv3x3-relu-maxpool2] blocks, then GAP, FC (no bias), softmax.

    Tap points sit after the first and second block (strides 2 and 4).
    """
    rng = np.random.default_rng(seed)
    layers = trunk_layers(rng, in_channels, widths)
    layers += [
        LayerSpec(L.GAP, name="gap"),
        LayerSpec(L.FC, weights=glorot(rng, (class_count, widths[-1])), name="fc"),
        LayerSpec(L.SOFTMAX, name="prob"),
    ]
    taps = {"shallow": 2, "deep": 5} if len(widths) >= 3 else {}
    return Network(layers, CLASSIFIER, class_count, in_channels, taps)


def build_segmenter(class_count: int, in_channels: int = 3, widths=(8, 16, 32), seed: int = 0,
                    trunk: Network | None = None, output_stride: int | None = 4) -> Network:
    """Fully convolutional segmenter: classifier trunk, 1x1 conv to K+1, upsample, per-pixel softmax.

    If ``trunk`` is given its convolution weights initialise the trunk.
    Trailing max-pools are removed until the score map sits at
    ``output_stride`` (``None`` keeps every pool).
    """
    rng = np.random.default_rng(seed)
    layers = trunk_layers(rng, in_channels, widths)
    if output_stride is not None:
        stride = 2 ** len(widths)
        while stride > output_stride and layers[-1].kind == L.MAX_POOL:
            layers.pop()
            stride //= 2
    if trunk is not None:
        src = [layer for layer in trunk.layers if layer.kind == L.CONV]
        dst = [layer for layer in layers if layer.kind == L.CONV]
        if len(src) < len(dst):
            raise ConfigurationError("trunk network is shallower than the segmenter trunk")
        for d, s in zip(dst, src):
            if d.weights.shape != s.weights.shape:
                raise ConfigurationError("trunk weights do not match segmenter widths")
            d.weights = s.weights.copy()
            d.bias = None if s.bias is None else s.bias.copy()
    layers += [
        conv_layer(rng, widths[-1], class_count + 1, k=1, name="score"),
        LayerSpec(L.UPSAMPLE, name="upsample"),
        LayerSpec(L.PIXEL_SOFTMAX, name="prob"),
    ]
    return Network(layers, SEGMENTER, class_count, in_channels, {"shallow": 2, "deep": 5})


# -- forward ---------------------------------------------------------------

def _as_batch(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 1:
        return x[None], False
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise UsageError(f"expected C x H x W or N x C x H x W input, got shape {x.shape}")


def _layer_forward(layer: LayerSpec, x, in_hw):
    k = layer.kind
    if k == L.CONV:
        if x.ndim != 4 or x.shape[0] != layer.weights.shape[1]:
            raise ConfigurationError(
                f"layer {layer.name or k}: expected {layer.weights.shape[1]} input channels, got shape {to_public(x).shape}")
        return L.conv_forward(x, layer.weights, layer.bias, layer.stride, layer.padding)
    if k == L.RELU:
        return np.maximum(x, 0.0), None
    if k in (L.MAX_POOL, L.AVG_POOL):
        if x.ndim != 4:
            raise ConfigurationError(f"{k} needs a spatial input")
        try:
            if k == L.MAX_POOL:
                return L.maxpool_forward(x, layer.kernel), None
            return L.avgpool_forward(x, layer.kernel), None
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
    if k == L.GAP:
        if x.ndim != 4:
            raise ConfigurationError("global-average-pool needs a spatial input")
        return x.mean(axis=(2, 3)).T, None
    if k == L.FC:
        if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
            raise ConfigurationError(
                f"layer {layer.name or k}: expected {layer.weights.shape[1]} inputs, got shape {x.shape}")
        y = x @ layer.weights.T
        if layer.bias is not None:
            y = y + layer.bias
        return y, None
    if k == L.SOFTMAX:
        return L.softmax(x, axis=-1), None
    if k == L.PIXEL_SOFTMAX:
        return L.softmax(x, axis=0), None
    if k == L.UPSAMPLE:
        h, w = x.shape[2:]
        if in_hw[0] % h or in_hw[1] % w or in_hw[0] // h != in_hw[1] // w:
            raise ConfigurationError(f"cannot upsample {h}x{w} to input size {tuple(in_hw)} by an integer factor")
        return L.upsample_forward(x, in_hw[0] // h), in_hw[0] // h
    raise ConfigurationError(f"unsupported layer {k}")


def forward(net: Network, image, keep_cache: bool = False, stop: int | None = None) -> ActivationTrace:
    """Run ``image`` (``C,H,W`` or batched) through ``net`` and record every layer output.

    ``stop`` truncates the pass after that many layers.
    """
    x, batched = _as_batch(image)
    if x.shape[1] != net.in_channels:
        raise ConfigurationError(f"network expects {net.in_channels} input channels, got {x.shape[1]}")
    h = np.ascontiguousarray(x.transpose(1, 0, 2, 3)) if x.ndim == 4 else x
    in_hw = x.shape[2:]
    raw_input = h
    outputs, caches = [], []
    for layer in net.layers[:stop]:
        h, cache = _layer_forward(layer, h, in_hw)
        outputs.append(h)
        caches.append(cache if keep_cache else None)
    return ActivationTrace(x, outputs, batched, raw_input, caches if keep_cache else [],
                           [layer.kind for layer in net.layers[:stop]])


def classify(net: Network, image) -> np.ndarray:
    """Class probabilities; index ``k-1`` holds class ``k``."""
    if net.head != CLASSIFIER:
        raise UsageError("classify needs a classifier-headed network")
    return forward(net, image).probs


def segment_probs(net: Network, image) -> np.ndarray:
    """``(K+1) x H x W`` per-pixel class probabilities; channel 0 is background."""
    if net.head != SEGMENTER:
        raise UsageError("segment_probs needs a segmenter-headed network")
    return forward(net, image).probs


def predict_in_batches(net: Network, images, batch_size: int = 64) -> np.ndarray:
    parts = [forward(net, images[i:i + batch_size]).outputs[-1] for i in range(0, len(images), batch_size)]
    return np.concatenate(parts, axis=0)


# -- loss and gradient -----------------------------------------------------

def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _targets(net: Network, labels, n):
    t = np.asarray(labels)
    if net.head == CLASSIFIER:
        t = t.reshape(n)
        if np.any((t < 1) | (t > net.class_count)):
            raise UsageError("classifier labels must lie in 1..K")
        return t - 1
    t = t.reshape(n, *t.shape[-2:])
    bad = (t != IGNORE) & ((t < 0) | (t > net.class_count))
    if np.any(bad):
        raise UsageError("mask labels must lie in {0..K, IGNORE}")
    return t


def _logit_loss(net: Network, logits, targets):
    """Summed cross-entropy and its gradient with respect to the pre-softmax logits (channel-major)."""
    logp = _log_softmax(logits, axis=0 if logits.ndim == 4 else -1)
    if net.head == CLASSIFIER:
        rows = np.arange(len(targets))
        total = -logp[rows, targets].sum()
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return total, d, len(targets)
    valid = targets != IGNORE
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    total = -(picked * valid).sum()
    d = np.exp(logp)
    onehot = np.zeros_like(d)
    np.put_along_axis(onehot, safe[None], 1.0, axis=0)
    d = (d - onehot) * valid[None]
    return total, d, int(valid.sum())


def loss(net: Network, images, labels) -> float:
    """Summed cross-entropy (IGNORE pixels excluded for segmenters)."""
    x, _ = _as_batch(images)
    trace = forward(net, x, stop=len(net.layers) - 1)
    return float(_logit_loss(net, trace.raw[-1], _targets(net, labels, len(x)))[0])


def gradient(net: Network, images, labels):
    """Analytic gradient of the summed cross-entropy.

    Returns ``(loss, grads, count)`` where ``grads`` is aligned with
    ``net.params`` and ``count`` is the number of contributing samples
    (images for a classifier, labelled pixels for a segmenter).
    """
    x, _ = _as_batch(images)
    targets = _targets(net, labels, len(x))
    trace = forward(net, x, keep_cache=True, stop=len(net.layers) - 1)
    total, d, count = _logit_loss(net, trace.raw[-1], targets)

    per_layer = [None] * len(net.layers)
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        xin = trace.layer_input(i)
        k = layer.kind
        if k == L.CONV:
            dx, dw, db = L.conv_backward(d, xin.shape, trace.caches[i], layer.weights, layer.stride,
                                         layer.padding, layer.bias is not None, need_input=i > 0)
            per_layer[i] = (dw, db)
            d = dx
        elif k == L.FC:
            per_layer[i] = (d.T @ xin, d.sum(axis=0) if layer.bias is not None else None)
            d = d @ layer.weights
        elif k == L.RELU:
            d = d * (xin > 0)
        elif k == L.MAX_POOL:
            d = L.maxpool_backward(d, xin, trace.raw[i], layer.kernel)
        elif k == L.AVG_POOL:
            d = L.avgpool_backward(d, layer.kernel)
        elif k == L.GAP:
            h, w = xin.shape[2:]
            d = np.broadcast_to(d.T[:, :, None, None] / (h * w), xin.shape)
        elif k == L.UPSAMPLE:
            d = L.upsample_backward(d, xin.shape[2:], trace.caches[i])
        else:
            raise ConfigurationError(f"cannot backpropagate through {k} at position {i}")

    grads = []
    for layer, g in zip(net.layers, per_layer):
        if layer.weights is not None:
            grads.append(g[0])
        if layer.bias is not None:
            grads.append(g[1])
    return float(total), grads, count
