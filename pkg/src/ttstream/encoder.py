"""Offline masked forward pass of the transformer / conformer encoder.

Every layer uses pre-norm residual blocks. Attention adds a learned
relative-position vector to each key before the dot product; the vector is
looked up by the clipped offset ``t - tau`` (past offsets up to
``relpos_left``, future offsets up to ``relpos_right``). The layer bodies
take the attention and convolution steps as callables so the incremental
path in :mod:`ttstream.streaming` runs exactly the same arithmetic.
"""
import numpy as np

from .core import DTYPE, as_tensor, glu, layer_norm, masked_softmax_rows, relu, swish
from .exceptions import ShapeError
from .maskgen import build_mask

__all__ = [
    "relpos_index",
    "attend",
    "mha_relpos",
    "causal_depthwise_conv",
    "transformer_layer",
    "conformer_block",
    "encode_offline",
]


def relpos_index(cfg, query_pos, key_pos):
    """Row into the relative-position table for every (query, key) pair."""
    offset = np.asarray(query_pos)[:, None] - np.asarray(key_pos)[None, :]
    return np.clip(offset, -cfg.relpos_right, cfg.relpos_left) + cfg.relpos_right


def _split_heads(x, num_heads):
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads).transpose(1, 0, 2)


def attend(q, k, v, relpos, rel_idx, mask, cfg, check=True):
    """Multi-head attention core on already projected ``q``, ``k``, ``v``.

    ``q`` is ``(c, d)``, ``k``/``v`` are ``(n, d)``, ``rel_idx`` and ``mask``
    are ``(c, n)``. Returns the concatenated heads, ``(c, d)``.
    """
    h = cfg.num_heads
    qh = _split_heads(q, h)
    kh = _split_heads(k, h)
    vh = _split_heads(v, h)
    scores = qh @ kh.transpose(0, 2, 1)
    # q . p for every table row, then gathered per (query, key) offset
    rel = qh @ relpos.transpose(1, 2, 0)
    scores += rel[:, np.arange(rel_idx.shape[0])[:, None], rel_idx]
    scores *= DTYPE(1.0 / np.sqrt(cfg.d_head))
    weights = masked_softmax_rows(scores, mask, check=check)
    z = weights @ vh
    return z.transpose(1, 0, 2).reshape(q.shape[0], cfg.d_model)


def mha_relpos(x, w, mask, cfg):
    """Self-attention of ``x`` (``T x d``) under the boolean ``T x T`` mask."""
    x = as_tensor(x)
    t = x.shape[0]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t, t):
        raise ShapeError(f"mask shape {mask.shape} does not match {t} frames")
    pos = np.arange(t)
    z = attend(w.q(x), w.k(x), w.v(x), w.relpos, relpos_index(cfg, pos, pos), mask, cfg)
    return w.out(z)


def causal_depthwise_conv(x, kernel, history=None):
    """``y[t, c] = sum_k kernel[k, c] * x[t - K + 1 + k, c]``.

    ``history`` holds the ``K - 1`` frames preceding ``x`` (zeros at stream
    start when omitted).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    k = kernel.shape[0]
    if kernel.shape[1:] != x.shape[1:]:
        raise ShapeError(f"kernel {kernel.shape} does not match input {x.shape}")
    if history is None:
        history = np.zeros((k - 1, x.shape[1]), dtype=DTYPE)
    if history.shape != (k - 1, x.shape[1]):
        raise ShapeError(f"history must be {(k - 1, x.shape[1])}, got {history.shape}")
    padded = np.concatenate([history, x]) if k > 1 else x
    t = x.shape[0]
    y = kernel[0] * padded[0:t]
    for i in range(1, k):
        y += kernel[i] * padded[i:i + t]
    return y


def _ln(x, norm):
    return layer_norm(x, norm.gain, norm.bias)


def _ffn(x, block, act):
    return block.fc2(act(block.fc1(x)))


def _transformer_body(x, w, attention):
    x = x + attention(_ln(x, w.norm_attn))
    return x + _ffn(_ln(x, w.norm_ffn), w.ffn, relu)


def _conv_module(x, conv, depthwise):
    """Pointwise -> GLU -> causal depthwise (via ``depthwise``) -> LN -> swish -> pointwise."""
    y = glu(conv.pointwise1(x))
    y = depthwise(y)
    y = swish(_ln(y, conv.norm))
    return conv.pointwise2(y)


def _conformer_body(x, w, attention, depthwise):
    half = DTYPE(0.5)
    x = x + half * _ffn(_ln(x, w.norm_ffn_pre), w.ffn_pre, swish)
    x = x + attention(_ln(x, w.norm_attn))
    x = x + _conv_module(_ln(x, w.norm_conv), w.conv, depthwise)
    x = x + half * _ffn(_ln(x, w.norm_ffn), w.ffn, swish)
    return _ln(x, w.norm_out)


def transformer_layer(x, w, mask, cfg):
    x = as_tensor(x)
    return _transformer_body(x, w, lambda h: mha_relpos(h, w.attn, mask, cfg))


def conformer_block(x, w, mask, cfg):
    x = as_tensor(x)
    return _conformer_body(
        x, w,
        lambda h: mha_relpos(h, w.attn, mask, cfg),
        lambda h: causal_depthwise_conv(h, w.conv.depthwise),
    )


def encode_offline(features, model, spec):
    """Full-utterance encoder output ``F`` (``T x d_model``) under ``spec``."""
    cfg = model.config.encoder
    x = as_tensor(features)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"features must be T x {cfg.input_dim}, got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("need at least one frame")
    mask = build_mask(spec, x.shape[0])
    layer_fn = conformer_block if cfg.arch == "conformer" else transformer_layer
    h = model.input_proj(x)
    for w in model.layers:
        h = layer_fn(h, w, mask, cfg)
    return _ln(h, model.final_norm)
