"""LSTM predictor, additive joint network, lattice scoring and decoders.

Output index 0 is blank; labels are ``1..V``. The predictor is primed with
index 0 as the start symbol. The joint output projection and everything
after it run in float64: lattice sums stay normalised to ~1e-15, and a
sequence scores the same whether its joint rows are computed one at a time
(search) or as a whole lattice (forward pass).
"""
import itertools
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import DTYPE, relu, sigmoid
from .exceptions import ShapeError

__all__ = [
    "BLANK",
    "PredictorState",
    "initial_state",
    "predictor_step",
    "joint_logits",
    "joint_step",
    "log_softmax",
    "transducer_forward_logprob",
    "greedy_decode",
    "GreedyDecoder",
    "beam_search",
    "oracle_decode",
]

BLANK = 0
START = 0
MAX_SYMBOLS_PER_FRAME = 10


@dataclass(frozen=True)
class PredictorState:
    hidden: Tuple[np.ndarray, ...]
    cell: Tuple[np.ndarray, ...]


def initial_state(model):
    d = model.config.d_pred
    zeros = tuple(np.zeros(d, dtype=DTYPE) for _ in model.predictor.lstm)
    return PredictorState(hidden=zeros, cell=zeros)


def predictor_step(state, label, model):
    """Feed one label (``START``/0 or ``1..V``); return ``(g, new_state)``."""
    pred = model.predictor
    if not 0 <= label < pred.embedding.num_embeddings:
        raise ValueError(f"label {label} outside [0, {pred.embedding.num_embeddings})")
    x = pred.embedding[label]
    hidden, cell = [], []
    for layer, h, c in zip(pred.lstm, state.hidden, state.cell):
        gates = layer.ih(x) + layer.hh(h)
        i, f, g, o = np.split(gates, 4)
        c = sigmoid(f) * c + sigmoid(i) * np.tanh(g)
        h = sigmoid(o) * np.tanh(c)
        hidden.append(h)
        cell.append(c)
        x = h
    return x, PredictorState(tuple(hidden), tuple(cell))


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _output_weight64(lin):
    # weights are immutable once loaded, so the float64 copy is cached
    w = getattr(lin, "_weight64_t", None)
    if w is None:
        w = lin.weight.T.astype(np.float64)
        lin._weight64_t = w
    return w


def joint_logits(f, g, model):
    f = np.asarray(f, dtype=DTYPE)
    g = np.asarray(g, dtype=DTYPE)
    if f.shape[-1] != g.shape[-1]:
        raise ShapeError(f"encoder dim {f.shape[-1]} != predictor dim {g.shape[-1]}")
    h = relu(f + g)
    lin = model.joint.out
    if lin.quantized:
        return lin(h).astype(np.float64)
    return h.astype(np.float64) @ _output_weight64(lin) + lin.bias


def joint_step(f, g, model):
    """``log softmax(W_o relu(f + g) + b)`` over ``V + 1`` outputs."""
    return log_softmax(joint_logits(f, g, model))


def _predictor_outputs(labels, model):
    state = initial_state(model)
    g, state = predictor_step(state, START, model)
    outs = [g]
    for y in labels:
        g, state = predictor_step(state, y, model)
        outs.append(g)
    return np.stack(outs)


def transducer_forward_logprob(enc, labels, model):
    """``log P(labels | x)`` summed over all blank/label alignments."""
    enc = np.asarray(enc, dtype=DTYPE)
    labels = [int(y) for y in labels]
    t_len, u_len = enc.shape[0], len(labels)
    if t_len < 1:
        raise ValueError("need at least one encoder frame")
    g = _predictor_outputs(labels, model)
    lp = log_softmax(joint_logits(enc[:, None, :], g[None, :, :], model))  # T x (U+1) x (V+1)
    blank = lp[:, :, BLANK]
    emit = lp[:, np.arange(u_len), labels] if u_len else np.zeros((t_len, 0))
    alpha = np.full((t_len, u_len + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_len + 1):
            if t == 0 and u == 0:
                continue
            stay = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            move = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(stay, move)
    return float(alpha[-1, -1] + blank[-1, -1])


class GreedyDecoder:
    """Frame-synchronous greedy search that can be fed frames incrementally."""

    def __init__(self, model, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
        self.model = model
        self.max_symbols = max_symbols_per_frame
        self.tokens = []
        self.g, self.state = predictor_step(initial_state(model), START, model)

    def advance(self, enc):
        for f in np.asarray(enc, dtype=DTYPE):
            for _ in range(self.max_symbols):
                logits = joint_logits(f, self.g, self.model)
                k = int(np.argmax(logits))  # first maximum, so blank wins ties
                if k == BLANK:
                    break
                self.tokens.append(k)
                self.g, self.state = predictor_step(self.state, k, self.model)
        return self.tokens


def greedy_decode(enc, model, max_symbols_per_frame=MAX_SYMBOLS_PER_FRAME):
    return list(GreedyDecoder(model, max_symbols_per_frame).advance(enc))


def beam_search(enc, model, beam_width=5, max_expansions=None):
    """Prefix-merging transducer beam search; returns ``[(tokens, log_prob)]``.

    Per frame, hypotheses are expanded best-first: popping a hypothesis
    moves it to the next frame through a blank and extends it in place with
    every label. Identical label sequences are merged by adding their
    probabilities. Expansion stops once ``beam_width`` next-frame
    hypotheses beat the best remaining in-frame one.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    enc = np.asarray(enc, dtype=DTYPE)
    cache = {}

    def extend(prefix):
        # predictor output and state after feeding ``prefix``; memoised per search
        if prefix not in cache:
            if not prefix:
                cache[prefix] = predictor_step(initial_state(model), START, model)
            else:
                _, parent_state = extend(prefix[:-1])
                cache[prefix] = predictor_step(parent_state, prefix[-1], model)
        return cache[prefix]

    if max_expansions is None:
        max_expansions = max(8 * beam_width, 32)
    beam = {(): 0.0}
    for f in enc:
        frame_lp = {}

        def dist(prefix):
            if prefix not in frame_lp:
                frame_lp[prefix] = joint_step(f, extend(prefix)[0], model)
            return frame_lp[prefix]

        # hypotheses still emitting in this frame; a beam entry also collects
        # the paths that reach it from a shorter beam entry within this frame
        active = dict(beam)
        for y in beam:
            for cut in range(len(y)):
                prefix = y[:cut]
                if prefix in beam:
                    score = beam[prefix]
                    for j in range(cut, len(y)):
                        score += dist(y[:j])[y[j]]
                    active[y] = np.logaddexp(active[y], score)
        nxt = {}
        for _ in range(max_expansions * beam_width):
            if not active:
                break
            best = max(active, key=lambda k: (active[k], [-t for t in k]))
            best_score = active[best]
            if len(nxt) >= beam_width:
                kth = sorted(nxt.values(), reverse=True)[beam_width - 1]
                if kth >= best_score:
                    break
            del active[best]
            lp = dist(best)
            blank_score = best_score + lp[BLANK]
            nxt[best] = np.logaddexp(nxt[best], blank_score) if best in nxt else blank_score
            for k in range(1, lp.shape[0]):
                cand = best + (k,)
                if cand in beam:
                    continue  # already merged above
                score = best_score + lp[k]
                active[cand] = np.logaddexp(active[cand], score) if cand in active else score
        beam = dict(sorted(nxt.items(), key=lambda kv: (-kv[1], kv[0]))[:beam_width])
    ranked = sorted(beam.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(list(tokens), float(score)) for tokens, score in ranked]


def oracle_decode(enc, model, max_len):
    """Exhaustive argmax over label sequences of length ``<= max_len``."""
    vocab = model.config.vocab_size
    total = sum(vocab ** u for u in range(max_len + 1))
    if vocab ** max_len > 10 ** 6:
        raise ValueError(f"refusing to enumerate {total} sequences")
    best, best_lp = None, -np.inf
    for u in range(max_len + 1):
        for seq in itertools.product(range(1, vocab + 1), repeat=u):
            lp = transducer_forward_logprob(enc, seq, model)
            # strict > keeps the first (shortest, then lexicographically smallest) maximum
            if lp > best_lp:
                best, best_lp = list(seq), lp
    return best, float(best_lp)
