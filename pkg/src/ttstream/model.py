"""Model configuration and weight containers.

Weights are immutable after construction and may be shared between any
number of streams and decoders. Every tensor has a dotted name; the same
construction routine (:func:`build_model`) is used for random initialisation
and for checkpoint loading, so the naming scheme is defined exactly once.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import DTYPE
from .exceptions import ConfigError

__all__ = [
    "EncoderConfig",
    "ModelConfig",
    "Linear",
    "Embedding",
    "LayerNormWeights",
    "AttentionWeights",
    "FeedForwardWeights",
    "ConvModuleWeights",
    "LayerWeights",
    "LSTMLayerWeights",
    "PredictorWeights",
    "JointWeights",
    "ModelWeights",
    "build_model",
    "iter_tensors",
    "tensor_specs",
    "count_parameters",
]

ARCHS = ("transformer", "conformer")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    arch: str = "transformer"
    conv_kernel: int = 3
    relpos_left: int = 16
    relpos_right: int = 4
    input_dim: int = 8

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "ffn_dim", "conv_kernel",
                     "relpos_left", "relpos_right", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.d_model < 1 or self.num_heads < 1 or self.ffn_dim < 1 or self.input_dim < 1:
            raise ConfigError("dimensions must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} does not divide d_model={self.d_model}")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel must be >= 1")
        if self.relpos_left < 0 or self.relpos_right < 0:
            raise ConfigError("relpos bounds must be >= 0")

    @property
    def d_head(self):
        return self.d_model // self.num_heads

    @property
    def relpos_size(self):
        return self.relpos_left + self.relpos_right + 1


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 16
    predictor_layers: int = 2

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        for name in ("vocab_size", "predictor_layers"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")

    @property
    def d_pred(self):
        # the joint adds encoder and predictor outputs directly
        return self.encoder.d_model

    @property
    def num_outputs(self):
        return self.vocab_size + 1

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("model config must be a JSON object")
        data = dict(data)
        enc = data.pop("encoder", None)
        if enc is None:
            enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)}
            enc = {k: data.pop(k) for k in list(data) if k in enc_fields}
        if not isinstance(enc, dict):
            raise ConfigError("encoder config must be a JSON object")
        try:
            return cls(encoder=EncoderConfig(**enc), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


class Linear:
    """Float affine map ``y = x W^T + b`` with ``W`` stored as out x in."""

    quantized = False

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, dtype=DTYPE)
        self.bias = None if bias is None else np.asarray(bias, dtype=DTYPE)

    @property
    def shape(self):
        return self.weight.shape

    def __call__(self, x):
        y = x @ self.weight.T
        if self.bias is not None:
            y += self.bias
        return y

    def tensors(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class Embedding:
    quantized = False

    def __init__(self, table):
        self.table = np.asarray(table, dtype=DTYPE)

    @property
    def num_embeddings(self):
        return self.table.shape[0]

    def __getitem__(self, index):
        return self.table[index]

    def tensors(self, prefix):
        yield f"{prefix}.weight", self.table


@dataclass
class LayerNormWeights:
    gain: np.ndarray
    bias: np.ndarray


@dataclass
class AttentionWeights:
    q: Linear
    k: Linear
    v: Linear
    out: Linear
    relpos: np.ndarray  # (relpos_left + relpos_right + 1, heads, d_head)


@dataclass
class FeedForwardWeights:
    fc1: Linear
    fc2: Linear


@dataclass
class ConvModuleWeights:
    pointwise1: Linear  # d -> 2d, followed by GLU
    depthwise: np.ndarray  # (kernel, d)
    norm: LayerNormWeights
    pointwise2: Linear


@dataclass
class LayerWeights:
    norm_attn: LayerNormWeights
    attn: AttentionWeights
    norm_ffn: LayerNormWeights
    ffn: FeedForwardWeights
    # conformer only
    norm_ffn_pre: Optional[LayerNormWeights] = None
    ffn_pre: Optional[FeedForwardWeights] = None
    norm_conv: Optional[LayerNormWeights] = None
    conv: Optional[ConvModuleWeights] = None
    norm_out: Optional[LayerNormWeights] = None


@dataclass
class LSTMLayerWeights:
    ih: Linear  # 4h x in, carries the gate bias; gate order i, f, g, o
    hh: Linear  # 4h x h


@dataclass
class PredictorWeights:
    embedding: Embedding  # (V + 1) x d_pred, row 0 = blank / start
    lstm: List[LSTMLayerWeights]


@dataclass
class JointWeights:
    out: Linear  # (V + 1) x d_model


@dataclass
class ModelWeights:
    config: ModelConfig
    input_proj: Linear
    layers: List[LayerWeights]
    final_norm: LayerNormWeights
    predictor: PredictorWeights
    joint: JointWeights

    @property
    def encoder_config(self):
        return self.config.encoder

    @property
    def quantized(self):
        return self.input_proj.quantized


def build_model(config, make):
    """Assemble :class:`ModelWeights` by asking ``make`` for every tensor.

    ``make(name, kind, shape)`` returns the tensor called ``name``. ``kind`` is
    one of ``linear`` (out x in matrix), ``bias``, ``gain``, ``norm_bias``,
    ``relpos``, ``depthwise``, ``embedding``, ``lstm_bias``; a ``linear`` or
    ``embedding`` request may return either a float array or a quantized
    tensor, which decides the layer type. A ``bias`` request always directly
    follows the ``linear`` request of its layer.
    """
    from .quant import QuantTensor, QLinear, QEmbedding

    enc = config.encoder
    d = enc.d_model

    def linear(name, out_dim, in_dim, bias=True):
        w = make(f"{name}.weight", "linear", (out_dim, in_dim))
        b = make(f"{name}.bias", "bias", (out_dim,)) if bias else None
        if isinstance(w, QuantTensor):
            return QLinear(w, b)
        return Linear(w, b)

    def norm(name, dim=d):
        return LayerNormWeights(make(f"{name}.gain", "gain", (dim,)),
                                make(f"{name}.bias", "norm_bias", (dim,)))

    def ffn(name):
        return FeedForwardWeights(linear(f"{name}.fc1", enc.ffn_dim, d),
                                  linear(f"{name}.fc2", d, enc.ffn_dim))

    layers = []
    for i in range(enc.num_layers):
        p = f"encoder.layers.{i}"
        attn = AttentionWeights(
            q=linear(f"{p}.attn.q", d, d, bias=False),
            k=linear(f"{p}.attn.k", d, d, bias=False),
            v=linear(f"{p}.attn.v", d, d, bias=False),
            out=linear(f"{p}.attn.out", d, d, bias=False),
            relpos=make(f"{p}.attn.relpos", "relpos", (enc.relpos_size, enc.num_heads, enc.d_head)),
        )
        layer = LayerWeights(norm_attn=norm(f"{p}.norm_attn"), attn=attn,
                             norm_ffn=norm(f"{p}.norm_ffn"), ffn=ffn(f"{p}.ffn"))
        if enc.arch == "conformer":
            layer.norm_ffn_pre = norm(f"{p}.norm_ffn_pre")
            layer.ffn_pre = ffn(f"{p}.ffn_pre")
            layer.norm_conv = norm(f"{p}.norm_conv")
            layer.conv = ConvModuleWeights(
                pointwise1=linear(f"{p}.conv.pointwise1", 2 * d, d),
                depthwise=make(f"{p}.conv.depthwise", "depthwise", (enc.conv_kernel, d)),
                norm=norm(f"{p}.conv.norm"),
                pointwise2=linear(f"{p}.conv.pointwise2", d, d),
            )
            layer.norm_out = norm(f"{p}.norm_out")
        layers.append(layer)

    table = make("predictor.embedding.weight", "embedding", (config.num_outputs, config.d_pred))
    embedding = QEmbedding(table) if isinstance(table, QuantTensor) else Embedding(table)
    lstm = []
    for i in range(config.predictor_layers):
        h = config.d_pred
        ih = linear(f"predictor.lstm.{i}.ih", 4 * h, h, bias=False)
        ih.bias = np.asarray(make(f"predictor.lstm.{i}.bias", "lstm_bias", (4 * h,)), dtype=DTYPE)
        lstm.append(LSTMLayerWeights(ih=ih, hh=linear(f"predictor.lstm.{i}.hh", 4 * h, h, bias=False)))

    return ModelWeights(
        config=config,
        input_proj=linear("encoder.input_proj", d, enc.input_dim),
        layers=layers,
        final_norm=norm("encoder.final_norm"),
        predictor=PredictorWeights(embedding=embedding, lstm=lstm),
        joint=JointWeights(out=linear("joint.out", config.num_outputs, d)),
    )


def iter_tensors(model):
    """Yield ``(name, tensor)`` pairs in construction order.

    Quantized layers yield a :class:`~ttstream.quant.QuantTensor` for their
    weight matrix.
    """
    yield from _walk(model)


def tensor_specs(config):
    """``[(name, kind, shape)]`` for every tensor ``config`` implies."""
    specs = []

    def make(name, kind, shape):
        specs.append((name, kind, tuple(shape)))
        return np.broadcast_to(DTYPE(0), shape)

    build_model(config, make)
    return specs


def _walk(model):
    enc = model.config.encoder
    yield from model.input_proj.tensors("encoder.input_proj")
    for i, layer in enumerate(model.layers):
        p = f"encoder.layers.{i}"
        for attr in ("norm_attn", "norm_ffn", "norm_ffn_pre", "norm_conv", "norm_out"):
            ln = getattr(layer, attr)
            if ln is not None:
                yield f"{p}.{attr}.gain", ln.gain
                yield f"{p}.{attr}.bias", ln.bias
        for attr in ("q", "k", "v", "out"):
            yield from getattr(layer.attn, attr).tensors(f"{p}.attn.{attr}")
        yield f"{p}.attn.relpos", layer.attn.relpos
        for attr in ("ffn", "ffn_pre"):
            block = getattr(layer, attr)
            if block is not None:
                yield from block.fc1.tensors(f"{p}.{attr}.fc1")
                yield from block.fc2.tensors(f"{p}.{attr}.fc2")
        if enc.arch == "conformer":
            conv = layer.conv
            yield from conv.pointwise1.tensors(f"{p}.conv.pointwise1")
            yield from conv.pointwise2.tensors(f"{p}.conv.pointwise2")
            yield f"{p}.conv.depthwise", conv.depthwise
            yield f"{p}.conv.norm.gain", conv.norm.gain
            yield f"{p}.conv.norm.bias", conv.norm.bias
    yield "encoder.final_norm.gain", model.final_norm.gain
    yield "encoder.final_norm.bias", model.final_norm.bias
    yield from model.predictor.embedding.tensors("predictor.embedding")
    for i, layer in enumerate(model.predictor.lstm):
        w_ih = dict(layer.ih.tensors("x"))
        yield f"predictor.lstm.{i}.ih.weight", w_ih["x.weight"]
        yield f"predictor.lstm.{i}.bias", layer.ih.bias
        yield from layer.hh.tensors(f"predictor.lstm.{i}.hh")
    yield from model.joint.out.tensors("joint.out")


def count_parameters(config):
    """Number of scalar parameters implied by ``config`` (no allocation)."""
    return sum(int(np.prod(shape)) for _, _, shape in tensor_specs(config))
