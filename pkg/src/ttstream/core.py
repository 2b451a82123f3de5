"""Dense float32 kernels used by every other module.

Tensors are plain row-major ``numpy.ndarray`` objects of dtype float32.
"""
import numpy as np

from .exceptions import InvalidMaskError, ShapeError

DTYPE = np.float32

__all__ = [
    "DTYPE",
    "as_tensor",
    "matmul",
    "masked_softmax_rows",
    "layer_norm",
    "activation",
    "relu",
    "sigmoid",
    "swish",
    "glu",
]


def as_tensor(x):
    """Return ``x`` as a C-contiguous float32 array (no copy when possible)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def masked_softmax_rows(scores, mask, check=True):
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Disallowed entries come out as exact zeros. ``mask`` broadcasts against
    ``scores``; with ``check`` every mask row must allow at least one entry.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if check and not mask.any(axis=-1).all():
        raise InvalidMaskError("attention mask has a fully-masked row")
    masked = np.where(mask, scores, -np.inf)
    masked -= masked.max(axis=-1, keepdims=True)
    np.exp(masked, out=masked)
    masked /= masked.sum(axis=-1, keepdims=True)
    return masked


def layer_norm(x, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeError(
            f"layer_norm: last dim {x.shape[-1]} vs gain {gain.shape}, bias {bias.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + DTYPE(eps)) * gain + bias


def relu(x):
    return np.maximum(x, DTYPE(0))


def sigmoid(x):
    # tanh form: no overflow for large |x| and exactly 0.5 at 0
    x = np.asarray(x, dtype=DTYPE)
    return DTYPE(0.5) * (DTYPE(1) + np.tanh(DTYPE(0.5) * x))


def swish(x):
    return x * sigmoid(x)


def glu(x):
    x = np.asarray(x, dtype=DTYPE)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"glu needs an even last dimension, got {d}")
    return x[..., : d // 2] * sigmoid(x[..., d // 2 :])


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": lambda x: np.tanh(np.asarray(x, dtype=DTYPE)),
    "swish": swish,
    "glu": glu,
}


def activation(kind, x):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x, dtype=DTYPE))
