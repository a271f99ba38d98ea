"""Binary network checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"NSEGNET\\0"
    bytes 8..11   uint32 format version (1)
    bytes 12..19  uint64 header length H
    next H bytes  UTF-8 JSON header: head, class_count, in_channels,
                  tap_points, and per layer kind/kernel/stride/padding/name/meta
                  plus the shapes of its weight and bias arrays (null if absent)
    remainder     every present array, layer by layer (weights then bias),
                  as little-endian float64 in C order

Loading a checkpoint written by :func:`save_network` reproduces every
weight bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from noisyseg.convnet.layers import LayerSpec
from noisyseg.convnet.network import Network
from noisyseg.errors import ImageParseError

MAGIC = b"NSEGNET\0"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ImageParseError):
    """Malformed checkpoint file (carries the byte offset of the problem)."""


def _shape(a):
    return None if a is None else list(a.shape)


def to_bytes(net: Network) -> bytes:
    header = {
        "head": net.head,
        "class_count": net.class_count,
        "in_channels": net.in_channels,
        "tap_points": net.tap_points,
        "layers": [
            {"kind": layer.kind, "kernel": layer.kernel, "stride": layer.stride, "padding": layer.padding,
             "name": layer.name, "meta": layer.meta,
             "weights": _shape(layer.weights), "bias": _shape(layer.bias)}
            for layer in net.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob]
    for layer in net.layers:
        for a in (layer.weights, layer.bias):
            if a is not None:
                parts.append(np.ascontiguousarray(a, dtype=_LE_F64).tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Network:
    if data[:8] != MAGIC:
        raise CheckpointError("not a network checkpoint", 0)
    if len(data) < 20:
        raise CheckpointError("truncated checkpoint preamble", len(data))
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 8)
    if 20 + hlen > len(data):
        raise CheckpointError("truncated checkpoint header", len(data))
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}", 20) from None
    pos = 20 + hlen

    def take(shape):
        nonlocal pos
        if shape is None:
            return None
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError("truncated weight data", len(data))
        arr = np.frombuffer(data, dtype=_LE_F64, count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
        return arr

    layers = []
    for spec in header["layers"]:
        w = take(spec["weights"])
        b = take(spec["bias"])
        layers.append(LayerSpec(spec["kind"], spec["kernel"], spec["stride"], spec["padding"], w, b,
                                spec["name"], spec["meta"]))
    if pos != len(data):
        raise CheckpointError("trailing bytes after weight data", pos)
    return Network(layers, header["head"], header["class_count"], header["in_channels"],
                   {k: int(v) for k, v in header["tap_points"].items()})


def save_network(path, net: Network) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(to_bytes(net))
    tmp.replace(path)


def load_network(path) -> Network:
    return from_bytes(Path(path).read_bytes())
