"""Symmetric INT8 weights with dynamic per-frame activation quantization.

Weight matrices are quantized per output row with ``scale = max|row| / 127``
and round-half-to-even. At call time each input row gets its own scale
``max|x| / 127``; the integer dot products are accumulated exactly and the
result is rescaled by both scales. Softmax, normalisation, activations, the
depthwise kernel, the relative-position table and all biases stay float32.

The integer GEMM runs on ``torch._int_mm`` when torch is importable (int32
accumulation, vectorised int8 kernels). Otherwise, and for single-row
inputs where the kernel launch dominates, the integer operands are
multiplied as floats with enough mantissa to make every partial sum exact,
so both routes return identical values.
"""
from dataclasses import dataclass

import numpy as np

from .core import DTYPE
from .model import (
    AttentionWeights,
    ConvModuleWeights,
    FeedForwardWeights,
    JointWeights,
    LayerWeights,
    LSTMLayerWeights,
    ModelWeights,
    PredictorWeights,
)

try:
    import torch

    _INT_MM = getattr(torch, "_int_mm", None)
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None
    _INT_MM = None

__all__ = [
    "QuantTensor",
    "QLinear",
    "QEmbedding",
    "quantize_tensor",
    "dequantize",
    "int8_linear",
    "quantize_model",
    "has_int8_kernel",
    "layer_errors",
]

QMAX = 127
# float32 sums of integer products stay exact below 2**24
_F32_EXACT_LIMIT = 2 ** 24


@dataclass(frozen=True)
class QuantTensor:
    data: np.ndarray  # int8, same shape as the float tensor
    scales: np.ndarray  # float32, one per output row

    @property
    def shape(self):
        return self.data.shape

    @property
    def nbytes(self):
        return self.data.nbytes + self.scales.nbytes


def has_int8_kernel():
    return _INT_MM is not None


def quantize_tensor(w):
    """Per-row symmetric quantization of a 2-D float matrix."""
    w = np.asarray(w, dtype=DTYPE)
    if w.ndim != 2:
        raise ValueError(f"quantize_tensor expects a matrix, got shape {w.shape}")
    scales = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0], DTYPE)
    scales = scales / DTYPE(QMAX)
    # an all-zero row, or one so small its scale underflows, quantizes to zeros
    scales[scales == 0] = 1
    q = np.rint(w / scales[:, None])
    np.clip(q, -QMAX, QMAX, out=q)
    return QuantTensor(np.ascontiguousarray(q, dtype=np.int8), scales)


def dequantize(qt):
    return qt.data.astype(DTYPE) * qt.scales[:, None]


def _quantize_rows(x):
    sx = np.abs(x).max(axis=-1, keepdims=True)
    sx /= DTYPE(QMAX)
    sx[sx == 0] = 1
    q = x / sx
    np.rint(q, out=q)
    return q, sx


class QLinear:
    """INT8 drop-in for :class:`~ttstream.model.Linear`."""

    quantized = True

    def __init__(self, qweight, bias=None):
        self.qweight = qweight
        self.bias = None if bias is None else np.asarray(bias, dtype=DTYPE)
        out_dim, in_dim = qweight.shape
        exact_dtype = DTYPE if in_dim * QMAX * QMAX < _F32_EXACT_LIMIT else np.float64
        self._float_weight_t = np.ascontiguousarray(qweight.data.T, dtype=exact_dtype)
        # torch's CPU int8 GEMM returns wrong sums for a reduction length of 1
        self._torch_weight_t = (
            torch.from_numpy(qweight.data).t() if _INT_MM is not None and in_dim >= 8 else None
        )

    @property
    def shape(self):
        return self.qweight.shape

    def _int_matmul(self, q):
        # q holds integer values in [-127, 127]
        if self._torch_weight_t is not None and q.shape[0] > 1:
            acc = _INT_MM(torch.from_numpy(q.astype(np.int8)), self._torch_weight_t)
            return acc.numpy().astype(DTYPE, copy=False)
        return (q.astype(self._float_weight_t.dtype) @ self._float_weight_t).astype(DTYPE)

    def __call__(self, x):
        x = np.asarray(x, dtype=DTYPE)
        squeeze = x.ndim == 1
        rows = x.reshape(-1, x.shape[-1])
        q, sx = _quantize_rows(rows)
        y = self._int_matmul(q)
        y *= sx
        y *= self.qweight.scales
        if self.bias is not None:
            y += self.bias
        if squeeze:
            return y[0]
        return y.reshape(*x.shape[:-1], y.shape[-1])

    def tensors(self, prefix):
        yield f"{prefix}.weight", self.qweight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class QEmbedding:
    quantized = True

    def __init__(self, qtable):
        self.qtable = qtable

    @property
    def num_embeddings(self):
        return self.qtable.shape[0]

    def __getitem__(self, index):
        return self.qtable.data[index].astype(DTYPE) * self.qtable.scales[index]

    def tensors(self, prefix):
        yield f"{prefix}.weight", self.qtable


def int8_linear(x, qweight, bias=None):
    """``y = x W^T + b`` with INT8 weights and dynamically quantized ``x``."""
    return QLinear(qweight, bias)(x)


def _qlinear(lin):
    return QLinear(quantize_tensor(lin.weight), lin.bias)


def _qffn(block):
    if block is None:
        return None
    return FeedForwardWeights(_qlinear(block.fc1), _qlinear(block.fc2))


def quantize_model(model):
    """Return an INT8 copy of ``model``; the input model is left untouched."""
    if model.quantized:
        raise ValueError("model is already quantized")
    layers = []
    for layer in model.layers:
        attn = layer.attn
        conv = layer.conv
        layers.append(LayerWeights(
            norm_attn=layer.norm_attn,
            attn=AttentionWeights(q=_qlinear(attn.q), k=_qlinear(attn.k), v=_qlinear(attn.v),
                                  out=_qlinear(attn.out), relpos=attn.relpos),
            norm_ffn=layer.norm_ffn,
            ffn=_qffn(layer.ffn),
            norm_ffn_pre=layer.norm_ffn_pre,
            ffn_pre=_qffn(layer.ffn_pre),
            norm_conv=layer.norm_conv,
            conv=None if conv is None else ConvModuleWeights(
                pointwise1=_qlinear(conv.pointwise1), depthwise=conv.depthwise,
                norm=conv.norm, pointwise2=_qlinear(conv.pointwise2)),
            norm_out=layer.norm_out,
        ))
    lstm = [LSTMLayerWeights(ih=_qlinear(l.ih), hh=_qlinear(l.hh)) for l in model.predictor.lstm]
    return ModelWeights(
        config=model.config,
        input_proj=_qlinear(model.input_proj),
        layers=layers,
        final_norm=model.final_norm,
        predictor=PredictorWeights(
            embedding=QEmbedding(quantize_tensor(model.predictor.embedding.table)), lstm=lstm),
        joint=JointWeights(out=_qlinear(model.joint.out)),
    )


def layer_errors(model, qmodel, rows=16, seed=0):
    """Relative max-abs output error of every quantized linear map.

    Each map sees the same standard-normal input in both precisions; the
    error is ``max|y_int8 - y_f32| / max|y_f32|``.
    """
    rng = np.random.default_rng(seed)
    float_maps = dict(_linear_maps(model))
    report = []
    for name, qlin in _linear_maps(qmodel):
        if not isinstance(qlin, QLinear):
            continue
        lin = float_maps[name]
        x = rng.standard_normal((rows, lin.shape[1])).astype(DTYPE)
        ref = lin(x)
        err = np.max(np.abs(qlin(x) - ref)) / max(float(np.max(np.abs(ref))), 1e-30)
        report.append((name, float(err)))
    return report


def _linear_maps(model):
    yield "encoder.input_proj", model.input_proj
    for i, layer in enumerate(model.layers):
        p = f"encoder.layers.{i}"
        for attr in ("q", "k", "v", "out"):
            yield f"{p}.attn.{attr}", getattr(layer.attn, attr)
        for attr in ("ffn_pre", "ffn"):
            block = getattr(layer, attr)
            if block is not None:
                yield f"{p}.{attr}.fc1", block.fc1
                yield f"{p}.{attr}.fc2", block.fc2
        if layer.conv is not None:
            yield f"{p}.conv.pointwise1", layer.conv.pointwise1
            yield f"{p}.conv.pointwise2", layer.conv.pointwise2
    for i, lstm in enumerate(model.predictor.lstm):
        yield f"predictor.lstm.{i}.ih", lstm.ih
        yield f"predictor.lstm.{i}.hh", lstm.hh
    yield "joint.out", model.joint.out
