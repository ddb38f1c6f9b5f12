"""Binary model files.

Layout (all integers unsigned little-endian, all floats IEEE-754 float64
little-endian)::

    offset  size  field
    0       4     magic  b"MXQN"
    4       4     format version (currently 1)
    8       4     input_dim
    12      4     hidden_layers
    16      4     num_neurons
    20      4     output_dim
    24      8     training seed
    32      ...   for each layer k = 0 .. hidden_layers:
                    weights, fan_in * fan_out float64, row-major (fan_in rows)
                    biases, fan_out float64

Nothing follows the last bias vector. Momentum buffers are not stored, so a
loaded network starts with zero velocity.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .qlearn import NetSpec, QNetwork

MAGIC = b"MXQN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class ModelFileError(ValueError):
    """Corrupt or truncated model file."""


class ModelVersionError(ModelFileError):
    """Model file written by an incompatible format version."""


def dumps(net: QNetwork) -> bytes:
    spec = net.spec
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, spec.input_dim, spec.hidden_layers, spec.num_neurons, spec.output_dim, net.seed & (2**64 - 1))
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> QNetwork:
    if len(data) < _HEADER.size:
        raise ModelFileError("file shorter than the header")
    magic, version, input_dim, hidden, neurons, output_dim, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    try:
        spec = NetSpec(input_dim, hidden, neurons, output_dim)
    except ValueError as exc:
        raise ModelFileError(f"invalid header: {exc}") from None
    sizes = spec.layer_sizes
    expected = _HEADER.size + 8 * sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(data) != expected:
        raise ModelFileError(f"expected {expected} bytes, found {len(data)}")
    offset = _HEADER.size
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        weights.append(np.frombuffer(data, "<f8", n, offset).astype(np.float64).reshape(fan_in, fan_out))
        offset += 8 * n
        biases.append(np.frombuffer(data, "<f8", fan_out, offset).astype(np.float64))
        offset += 8 * fan_out
    return QNetwork(spec, weights, biases, seed)


def save_model(net: QNetwork, path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(net))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> QNetwork:
    return loads(Path(path).read_bytes())
