"""Incremental chunk-by-chunk encoding with per-layer key/value caches.

Each layer keeps the projected keys and values of recent frames together
with their absolute frame indices. Before a block of frames is processed,
cached frames older than ``block_start - H`` are evicted; the remaining
frames plus the new block form the attention context, and a per-row mask
built from absolute indices trims every query to its own history window.
Conformer layers also carry the last ``K - 1`` inputs of the causal
depthwise convolution. The outputs match :func:`~ttstream.encoder.encode_offline`
up to float32 summation order.
"""
import numpy as np

from .core import DTYPE, as_tensor, layer_norm
from .encoder import (
    _conformer_body,
    _transformer_body,
    attend,
    causal_depthwise_conv,
    encode_offline,
    relpos_index,
)
from .exceptions import SequencingError, ShapeError
from .maskgen import mask_from_positions

__all__ = ["KVCache", "StreamState", "open_stream", "step_chunk", "step_block",
           "encode_streaming", "verify_equivalence"]


class KVCache:
    """Keys and values of past frames for one layer, oldest first.

    Storage is a preallocated buffer that is compacted when full, so frames
    stay in temporal order and appends are amortised O(1). With a bounded
    history the live length never exceeds ``history + block``.
    """

    def __init__(self, d_model, capacity=64):
        capacity = max(int(capacity), 1)
        self._k = np.empty((capacity, d_model), dtype=DTYPE)
        self._v = np.empty((capacity, d_model), dtype=DTYPE)
        self._pos = np.empty(capacity, dtype=np.int64)
        self._start = 0
        self._end = 0

    def __len__(self):
        return self._end - self._start

    @property
    def positions(self):
        return self._pos[self._start:self._end]

    @property
    def keys(self):
        return self._k[self._start:self._end]

    @property
    def values(self):
        return self._v[self._start:self._end]

    def evict_before(self, frame):
        pos = self.positions
        self._start += int(np.searchsorted(pos, frame, side="left"))

    def append(self, k, v, positions):
        n = k.shape[0]
        live = len(self)
        cap = self._k.shape[0]
        if self._end + n > cap:
            if live + n > cap // 2:
                new_cap = max(2 * (live + n), cap)
                self._k = self._grow(self._k, new_cap)
                self._v = self._grow(self._v, new_cap)
                self._pos = self._grow(self._pos, new_cap)
            else:
                for buf in (self._k, self._v, self._pos):
                    buf[:live] = buf[self._start:self._end]
            self._start, self._end = 0, live
        self._k[self._end:self._end + n] = k
        self._v[self._end:self._end + n] = v
        self._pos[self._end:self._end + n] = positions
        self._end += n

    def _grow(self, buf, new_cap):
        out = np.empty((new_cap,) + buf.shape[1:], dtype=buf.dtype)
        out[:len(self)] = buf[self._start:self._end]
        return out


class StreamState:
    """Single-owner incremental encoder state over a shared immutable model."""

    def __init__(self, model, spec, block_size=None):
        cfg = model.config.encoder
        self.model = model
        self.spec = spec
        self.block_size = spec.chunk_size if block_size is None else int(block_size)
        if self.block_size < 1 or self.block_size % spec.chunk_size:
            raise ValueError(
                f"block size {self.block_size} must be a positive multiple of chunk size {spec.chunk_size}")
        h = spec.history_window
        capacity = 2 * ((64 if h is None else h) + self.block_size)
        self.caches = [KVCache(cfg.d_model, capacity) for _ in model.layers]
        k = cfg.conv_kernel
        self.conv_history = [
            np.zeros((k - 1, cfg.d_model), dtype=DTYPE) if cfg.arch == "conformer" else None
            for _ in model.layers
        ]
        self.frames_consumed = 0
        self.finished = False

    @property
    def cached_frames(self):
        return [len(c) for c in self.caches]


def open_stream(model, spec, block_size=None):
    """Fresh state: empty caches, zero conv history, nothing consumed.

    ``block_size`` (a multiple of the chunk size) groups several chunks per
    call purely for throughput; results do not depend on it.
    """
    return StreamState(model, spec, block_size)


def _layer_step(state, index, x, pos):
    cfg = state.model.config.encoder
    spec = state.spec
    w = state.model.layers[index]
    cache = state.caches[index]
    if spec.history_window is not None:
        cache.evict_before(int(pos[0]) - spec.reach)

    def attention(h):
        k_new = w.attn.k(h)
        v_new = w.attn.v(h)
        cache.append(k_new, v_new, pos)
        keys, values, kpos = cache.keys, cache.values, cache.positions
        mask = mask_from_positions(spec, pos, kpos)
        z = attend(w.attn.q(h), keys, values, w.attn.relpos,
                   relpos_index(cfg, pos, kpos), mask, cfg, check=False)
        return w.attn.out(z)

    if cfg.arch != "conformer":
        return _transformer_body(x, w, attention)

    def depthwise(h):
        hist = state.conv_history[index]
        y = causal_depthwise_conv(h, w.conv.depthwise, hist)
        k = hist.shape[0]
        if k:
            state.conv_history[index] = np.concatenate([hist, h])[-k:]
        return y

    return _conformer_body(x, w, attention, depthwise)


def step_block(state, frames):
    """Encode the next ``frames`` (``b x input_dim``) and return ``b x d_model``.

    A block must hold whole chunks; only the last block of an utterance may
    be shorter than ``state.block_size`` or end mid-chunk.
    """
    cfg = state.model.config.encoder
    x = as_tensor(frames)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"frames must be b x {cfg.input_dim}, got {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty block")
    if n > state.block_size:
        raise ValueError(f"block of {n} frames exceeds block size {state.block_size}")
    if state.finished:
        raise SequencingError("stream already received its final (short) chunk")
    start = state.frames_consumed
    pos = np.arange(start, start + n)
    if n < state.block_size:
        # a short block (possibly ending mid-chunk) can only close the utterance
        state.finished = True
    h = state.model.input_proj(x)
    for i in range(len(state.model.layers)):
        h = _layer_step(state, i, h, pos)
    state.frames_consumed += n
    w = state.model.final_norm
    return layer_norm(h, w.gain, w.bias)


def step_chunk(state, chunk):
    """Encode one chunk of at most ``chunk_size`` frames."""
    n = np.shape(chunk)[0]
    if n > state.spec.chunk_size:
        raise ValueError(f"chunk of {n} frames exceeds chunk size {state.spec.chunk_size}")
    if state.block_size != state.spec.chunk_size:
        raise ValueError("step_chunk needs a stream opened with block_size == chunk_size")
    return step_block(state, chunk)


def encode_streaming(features, model, spec, block_size=None):
    """Run a whole utterance through a fresh stream, block by block."""
    state = open_stream(model, spec, block_size)
    x = as_tensor(features)
    b = state.block_size
    return np.concatenate([step_block(state, x[i:i + b]) for i in range(0, x.shape[0], b)])


def pseudo_features(num_frames, input_dim, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((num_frames, input_dim)).astype(DTYPE)


def verify_equivalence(model, spec, num_frames, tolerance=1e-4, seed=0, fault=False):
    """Max-abs difference between streaming and offline encodings.

    ``fault`` corrupts the first cached key of every layer after the first
    chunk (negative control for the verification gate).
    """
    x = pseudo_features(num_frames, model.config.encoder.input_dim, seed)
    offline = encode_offline(x, model, spec)
    state = open_stream(model, spec)
    c = spec.chunk_size
    outs = []
    for i in range(0, num_frames, c):
        outs.append(step_chunk(state, x[i:i + c]))
        if fault and i == 0:
            for cache in state.caches:
                if len(cache):
                    cache.keys[0] += DTYPE(1.0)
    diff = float(np.max(np.abs(np.concatenate(outs) - offline)))
    return diff
