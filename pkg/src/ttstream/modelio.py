"""Checkpoint and feature file formats, random initialisation, frame stacking.

Checkpoint layout (all integers little-endian)::

    b"TTCKPT01" | u64 manifest length | manifest (UTF-8 JSON) | blob

The manifest holds ``format_version``, the model ``config``, a ``quantized``
flag and a ``tensors`` directory of ``{name, dtype, shape, offset, length}``
entries whose byte ranges tile the blob. ``dtype`` is ``f32`` or ``i8``; an
INT8 matrix ``name`` is accompanied by an ``f32`` tensor ``name.scales``.

Feature file layout::

    b"TTFEAT01" | u32 T | u32 D | T*D float32, row-major
"""
import json
import math
import os
import struct

import numpy as np

from .core import DTYPE
from .exceptions import (
    BadMagicError,
    ConfigError,
    ManifestError,
    SizeMismatchError,
    TruncatedError,
    UnknownDtypeError,
)
from .model import ModelConfig, build_model, iter_tensors
from .quant import QuantTensor

__all__ = [
    "CHECKPOINT_MAGIC",
    "FEATURE_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "payload_bytes",
    "parse_checkpoint",
    "random_init",
    "stack_frames",
    "read_features",
    "write_features",
    "features_bytes",
    "parse_features",
]

CHECKPOINT_MAGIC = b"TTCKPT01"
FEATURE_MAGIC = b"TTFEAT01"
FORMAT_VERSION = 1
MAX_FEATURE_BYTES = 2 ** 31

_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}


def _entries(model):
    for name, tensor in iter_tensors(model):
        if isinstance(tensor, QuantTensor):
            yield name, "i8", tensor.data
            yield f"{name}.scales", "f32", tensor.scales
        else:
            yield name, "f32", tensor


def checkpoint_bytes(model):
    directory, payloads, offset = [], [], 0
    for name, dtype, array in _entries(model):
        raw = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(array.shape),
                          "offset": offset, "length": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "quantized": bool(model.quantized),
        "tensors": directory,
    }
    text = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<Q", len(text)), text] + payloads)


def payload_bytes(model):
    """Size of the tensor blob alone, without magic and manifest."""
    return sum(np.asarray(a).size * _DTYPES[dt].itemsize for _, dt, a in _entries(model))


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def _int(value, what):
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ManifestError(f"{what} must be a non-negative integer, got {value!r}")
    return value


def _read_directory(entries, blob_len):
    if not isinstance(entries, list):
        raise ManifestError("tensor directory must be a list")
    table = {}
    spans = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise ManifestError("tensor entry must be an object")
        name = entry.get("name")
        if not isinstance(name, str):
            raise ManifestError(f"tensor name must be a string, got {name!r}")
        if name in table:
            raise ManifestError(f"duplicate tensor {name!r}")
        dtype = entry.get("dtype")
        if dtype not in _DTYPES:
            raise UnknownDtypeError(f"{name}: unknown dtype {dtype!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list):
            raise ManifestError(f"{name}: shape must be a list")
        shape = tuple(_int(s, f"{name} shape entry") for s in shape)
        offset = _int(entry.get("offset"), f"{name} offset")
        length = _int(entry.get("length"), f"{name} length")
        if length != math.prod(shape) * _DTYPES[dtype].itemsize:
            raise ManifestError(f"{name}: length {length} does not match shape {shape} ({dtype})")
        if offset + length > blob_len:
            raise TruncatedError(f"{name}: bytes [{offset}, {offset + length}) beyond blob end {blob_len}")
        table[name] = (dtype, shape, offset, length)
        spans.append((offset, length, name))
    end = 0
    for offset, length, name in sorted(spans):
        if offset != end:
            raise ManifestError(f"{name}: tensor ranges do not tile the blob (gap or overlap at {offset})")
        end = offset + length
    if end != blob_len:
        raise ManifestError(f"blob has {blob_len - end} unclaimed trailing bytes")
    return table


def parse_checkpoint(data):
    """Decode checkpoint ``bytes`` into :class:`~ttstream.model.ModelWeights`."""
    data = memoryview(data)
    if len(data) < len(CHECKPOINT_MAGIC):
        if bytes(data) == CHECKPOINT_MAGIC[:len(data)]:
            raise TruncatedError("file ends inside the magic")
        raise BadMagicError("not a checkpoint (bad magic)")
    if bytes(data[:8]) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:8])!r}")
    if len(data) < 16:
        raise TruncatedError("file ends inside the manifest length")
    (manifest_len,) = struct.unpack("<Q", data[8:16])
    if manifest_len > len(data) - 16:
        raise TruncatedError(f"manifest length {manifest_len} exceeds file size {len(data)}")
    try:
        manifest = json.loads(bytes(data[16:16 + manifest_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        config = ModelConfig.from_dict(manifest.get("config"))
    except (ConfigError, TypeError, ValueError) as exc:
        raise ManifestError(f"invalid config: {exc}") from None
    blob = data[16 + manifest_len:]
    table = _read_directory(manifest.get("tensors"), len(blob))
    used = set()

    def fetch(name, shape=None, dtype=None):
        if name not in table:
            raise ManifestError(f"missing tensor {name!r}")
        got_dtype, got_shape, offset, length = table[name]
        if dtype is not None and got_dtype != dtype:
            raise ManifestError(f"{name}: expected dtype {dtype}, got {got_dtype}")
        if shape is not None and got_shape != tuple(shape):
            raise ManifestError(f"{name}: expected shape {tuple(shape)}, got {got_shape}")
        used.add(name)
        arr = np.frombuffer(blob, dtype=_DTYPES[got_dtype], count=math.prod(got_shape), offset=offset)
        return arr.reshape(got_shape).copy()

    def make(name, kind, shape):
        entry = table.get(name)
        if kind in ("linear", "embedding") and entry is not None and entry[0] == "i8":
            q = fetch(name, shape, "i8")
            scales = fetch(f"{name}.scales", (shape[0],), "f32")
            if not np.all(scales > 0) or not np.all(np.isfinite(scales)):
                raise ManifestError(f"{name}.scales must be positive and finite")
            if np.any(q == -128):
                raise ManifestError(f"{name}: int8 payload uses -128")
            return QuantTensor(q, scales.astype(DTYPE))
        return fetch(name, shape, "f32").astype(DTYPE, copy=False)

    model = build_model(config, make)
    extra = set(table) - used
    if extra:
        raise ManifestError(f"unexpected tensors: {sorted(extra)[:5]}")
    if bool(manifest.get("quantized", False)) != model.quantized:
        raise ManifestError("quantized flag disagrees with tensor dtypes")
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def random_init(config, seed=0, blank_bias=0.0):
    """Deterministic synthetic weights for ``config``.

    Matrices draw from ``uniform(-a, a)`` with ``a = 1/sqrt(fan_in)``, and a
    layer bias shares the bound of its matrix. LSTM gate biases are zero
    except the forget gate (1.0); norm gains are 1 and norm biases 0; the
    relative-position table uses ``a = 0.02``.

    ``blank_bias`` is added to the joint's blank logit. Trained transducers
    emit blank on most frames while a random joint emits a label almost
    everywhere; a positive value restores a realistic emission rate for
    benchmarking.
    """
    rng = np.random.default_rng(seed)
    last_bound = [1.0]

    def uniform(bound, shape):
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)

    def make(name, kind, shape):
        if kind == "linear":
            last_bound[0] = 1.0 / math.sqrt(shape[1])
            return uniform(last_bound[0], shape)
        if kind == "bias":
            return uniform(last_bound[0], shape)
        if kind == "embedding":
            return uniform(1.0 / math.sqrt(shape[1]), shape)
        if kind == "depthwise":
            return uniform(1.0 / math.sqrt(shape[0]), shape)
        if kind == "relpos":
            return uniform(0.02, shape)
        if kind == "gain":
            return np.ones(shape, dtype=DTYPE)
        if kind == "norm_bias":
            return np.zeros(shape, dtype=DTYPE)
        if kind == "lstm_bias":
            b = np.zeros(shape, dtype=DTYPE)
            h = shape[0] // 4
            b[h:2 * h] = 1.0
            return b
        raise ValueError(f"unknown tensor kind {kind!r}")

    model = build_model(config, make)
    if blank_bias:
        model.joint.out.bias[0] += DTYPE(blank_bias)
    return model


def stack_frames(x, window=8, stride=3):
    """Concatenate ``window`` consecutive frames every ``stride`` frames.

    Output frame ``i`` holds input frames ``[i*stride, i*stride + window)``,
    zero-padded past the end.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    x = np.asarray(x, dtype=DTYPE)
    t, d = x.shape
    n = -(-t // stride)
    padded = np.zeros(((n - 1) * stride + window if n else 0, d), dtype=DTYPE)
    padded[:min(t, padded.shape[0])] = x[:padded.shape[0]]
    idx = np.arange(n)[:, None] * stride + np.arange(window)[None, :]
    return padded[idx].reshape(n, window * d)


def features_bytes(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    t, d = x.shape
    return FEATURE_MAGIC + struct.pack("<II", t, d) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def write_features(x, path):
    with open(path, "wb") as fh:
        fh.write(features_bytes(x))


def parse_features(data):
    data = memoryview(data)
    if bytes(data[:8]) != FEATURE_MAGIC[:min(8, len(data))] or len(data) == 0:
        raise BadMagicError("not a feature file (bad magic)")
    if len(data) < 16:
        raise TruncatedError("feature header is truncated")
    t, d = struct.unpack("<II", data[8:16])
    expected = 4 * t * d
    if expected > MAX_FEATURE_BYTES:
        raise SizeMismatchError(f"header declares {expected} payload bytes (cap {MAX_FEATURE_BYTES})")
    payload = len(data) - 16
    if payload < expected:
        raise TruncatedError(f"payload has {payload} bytes, header declares {expected}")
    if payload > expected:
        raise SizeMismatchError(f"payload has {payload - expected} trailing bytes")
    return np.frombuffer(data, dtype="<f4", count=t * d, offset=16).reshape(t, d).astype(DTYPE)


def read_features(path):
    size = os.path.getsize(path)
    if size > MAX_FEATURE_BYTES + 16:
        raise SizeMismatchError(f"{path}: file of {size} bytes exceeds the feature cap")
    with open(path, "rb") as fh:
        return parse_features(fh.read())
