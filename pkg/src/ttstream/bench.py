"""Real-time-factor benchmark over a corpus of feature matrices.

Each utterance is streamed block by block through the encoder and a greedy
decoder; wall time covers encoder, predictor, joint and search but not model
loading or file I/O. ``RTF = compute_seconds / audio_seconds`` with 30 ms of
audio per frame.
"""
import csv
import dataclasses
import multiprocessing as mp
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .maskgen import MaskSpec
from .streaming import open_stream, step_block
from .transducer import GreedyDecoder

__all__ = ["FRAME_SHIFT", "BenchRow", "real_time_factor", "run_utterance", "run_bench",
           "write_report", "synthetic_corpus"]

FRAME_SHIFT = 0.030


def real_time_factor(compute_seconds, frames, frame_shift=FRAME_SHIFT):
    return compute_seconds / (frames * frame_shift)


@dataclass
class BenchRow:
    chunk_batch: int
    history: str
    arch: str
    precision: str
    workers: int
    utterances: int
    frames: int
    audio_seconds: float
    compute_seconds: float
    encode_seconds: float
    rtf: float
    latency_p50_ms: float
    latency_p95_ms: float
    frame_cost_q1_us: float
    frame_cost_q2_us: float
    frame_cost_q3_us: float
    frame_cost_q4_us: float


@dataclass
class UtteranceResult:
    tokens: List[int]
    frames: int
    compute_seconds: float
    encode_seconds: float
    block_latencies: List[float]
    quartile_seconds: List[float]  # summed per-frame cost by position quartile
    quartile_frames: List[int]


def run_utterance(model, spec, features, block_size):
    state = open_stream(model, spec, block_size)
    decoder = GreedyDecoder(model)
    n = features.shape[0]
    latencies = []
    q_sec = [0.0] * 4
    q_frames = [0] * 4
    encode = 0.0
    clock = time.perf_counter
    for start in range(0, n, block_size):
        block = features[start:start + block_size]
        t0 = clock()
        enc = step_block(state, block)
        t1 = clock()
        decoder.advance(enc)
        t2 = clock()
        encode += t1 - t0
        latencies.append(t2 - t0)
        # attribute block cost to the quartile of its first frame
        q = min(4 * start // n, 3)
        q_sec[q] += t1 - t0
        q_frames[q] += block.shape[0]
    return UtteranceResult(list(decoder.tokens), n, float(sum(latencies)), encode,
                           latencies, q_sec, q_frames)


_WORKER = {}


def _worker_init(model, spec, block_size):
    _WORKER.update(model=model, spec=spec, block_size=block_size)


def _worker_run(features):
    return run_utterance(_WORKER["model"], _WORKER["spec"], features, _WORKER["block_size"])


def _run_corpus(model, spec, corpus, block_size, workers):
    if workers <= 1:
        t0 = time.perf_counter()
        results = [run_utterance(model, spec, x, block_size) for x in corpus]
        return results, time.perf_counter() - t0
    ctx = mp.get_context("fork")
    with ctx.Pool(workers, initializer=_worker_init, initargs=(model, spec, block_size)) as pool:
        pool.map(_worker_run, corpus[:workers])  # warm-up, excluded from timing
        t0 = time.perf_counter()
        results = pool.map(_worker_run, corpus, chunksize=1)
        wall = time.perf_counter() - t0
    return results, wall


def run_bench(model, corpus, batch_sizes=(1, 2, 5, 10, 15), chunk_size=1, history=60,
              workers=1, precision=None):
    """Benchmark every block size in ``batch_sizes``; returns ``(rows, tokens)``.

    ``chunk_size``/``history`` define the attention mask the model was
    trained with; each block size must be a multiple of ``chunk_size``.
    ``tokens[b]`` lists the greedy output of every utterance at block size b.
    """
    if not corpus:
        raise ValueError("empty corpus")
    spec = MaskSpec(chunk_size, history)
    precision = precision or ("int8" if model.quantized else "f32")
    rows, tokens = [], {}
    for b in batch_sizes:
        results, wall = _run_corpus(model, spec, corpus, b, workers)
        frames = sum(r.frames for r in results)
        compute = wall if workers > 1 else sum(r.compute_seconds for r in results)
        lat = np.array([l for r in results for l in r.block_latencies]) * 1e3
        q_sec = np.sum([r.quartile_seconds for r in results], axis=0)
        q_frames = np.maximum(np.sum([r.quartile_frames for r in results], axis=0), 1)
        cost = q_sec / q_frames * 1e6
        rows.append(BenchRow(
            chunk_batch=b, history=str(spec.history_window if spec.history_window is not None else "inf"),
            arch=model.config.encoder.arch, precision=precision, workers=workers,
            utterances=len(corpus), frames=frames, audio_seconds=frames * FRAME_SHIFT,
            compute_seconds=compute, encode_seconds=sum(r.encode_seconds for r in results),
            rtf=real_time_factor(compute, frames),
            latency_p50_ms=float(np.percentile(lat, 50)), latency_p95_ms=float(np.percentile(lat, 95)),
            frame_cost_q1_us=float(cost[0]), frame_cost_q2_us=float(cost[1]),
            frame_cost_q3_us=float(cost[2]), frame_cost_q4_us=float(cost[3]),
        ))
        tokens[b] = [r.tokens for r in results]
    return rows, tokens


def write_report(rows, path):
    fields = [f.name for f in dataclasses.fields(BenchRow)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(dataclasses.asdict(row))


def synthetic_corpus(count, input_dim, mean_frames=423, spread=0.25, seed=0):
    """Random feature matrices; the default length mirrors ~12.7 s utterances."""
    rng = np.random.default_rng(seed)
    lo = max(1, int(mean_frames * (1 - spread)))
    hi = max(lo + 1, int(mean_frames * (1 + spread)))
    return [rng.standard_normal((int(rng.integers(lo, hi)), input_dim)).astype(np.float32)
            for _ in range(count)]
