"""Chunk-based attention masks with a truncated history window.

Frames are grouped into consecutive, non-overlapping chunks of
``chunk_size`` frames starting at frame 0 (the final chunk may be shorter).
Frame ``i`` may attend to frame ``j`` when

* both frames sit in the same chunk, or
* ``j`` lies in an earlier chunk and ``i - j <= history_window``.

A frame never attends to a later chunk, so the right edge of the reception
field is pinned to the end of the frame's own chunk no matter how many
layers are stacked, while the left edge grows by up to the history window per
layer. All indices in this module are 0-based.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError

__all__ = [
    "MaskSpec",
    "ReceptionField",
    "build_mask",
    "mask_from_positions",
    "reachability",
    "reception_field",
    "avg_lookahead",
    "frame_lookahead",
]


@dataclass(frozen=True)
class MaskSpec:
    """Chunk size ``C`` and history window ``H`` (``None`` means unbounded).

    ``strict_history`` switches the cross-chunk distance test from
    ``i - j <= H`` to ``i - j < H``.
    """

    chunk_size: int = 1
    history_window: Optional[int] = None
    strict_history: bool = False

    def __post_init__(self):
        h = self.history_window
        if h is not None and isinstance(h, float) and math.isinf(h):
            object.__setattr__(self, "history_window", None)
            h = None
        if int(self.chunk_size) != self.chunk_size or self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be an integer >= 1, got {self.chunk_size}")
        object.__setattr__(self, "chunk_size", int(self.chunk_size))
        if h is not None:
            if int(h) != h or h < 0:
                raise ConfigError(f"history_window must be >= 0 or None, got {h}")
            object.__setattr__(self, "history_window", int(h))

    @property
    def unbounded(self):
        return self.history_window is None

    @property
    def reach(self):
        """Largest cross-chunk backward distance allowed (``inf`` if unbounded)."""
        if self.history_window is None:
            return math.inf
        return self.history_window - 1 if self.strict_history else self.history_window

    def chunk_of(self, frame):
        return frame // self.chunk_size

    def __str__(self):
        h = "inf" if self.history_window is None else str(self.history_window)
        return f"C={self.chunk_size},H={h}"


@dataclass(frozen=True)
class ReceptionField:
    frame: int
    layers: int
    left: int
    right: int


def mask_from_positions(spec, query_pos, key_pos):
    """Mask rows for absolute ``query_pos`` against columns at ``key_pos``."""
    qi = np.asarray(query_pos)[:, None]
    kj = np.asarray(key_pos)[None, :]
    cq = qi // spec.chunk_size
    ck = kj // spec.chunk_size
    same = cq == ck
    earlier = ck < cq
    if spec.history_window is not None:
        earlier &= (qi - kj) <= spec.reach
    return same | earlier


def build_mask(spec, num_frames):
    """Return the ``T x T`` boolean mask ``M`` with ``M[i, j]`` = i may see j."""
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    pos = np.arange(num_frames)
    return mask_from_positions(spec, pos, pos)


def reachability(spec, num_layers, num_frames):
    """Boolean closure of the mask over ``num_layers`` stacked layers.

    ``R[t, j]`` is true when input frame ``j`` can influence output ``t``.
    Computed as the boolean matrix power ``M**L``.
    """
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    m = build_mask(spec, num_frames).astype(np.int64)
    reach = np.eye(num_frames, dtype=np.int64)
    for _ in range(num_layers):
        reach = ((reach @ m) > 0).astype(np.int64)
    return reach.astype(bool)


def reception_field(spec, num_layers, frame, num_frames):
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    if not 0 <= frame < num_frames:
        raise ValueError(f"frame {frame} outside [0, {num_frames})")
    m = build_mask(spec, num_frames)
    row = np.zeros(num_frames, dtype=bool)
    row[frame] = True
    for _ in range(num_layers):
        row = m[row].any(axis=0)
    idx = np.flatnonzero(row)
    return ReceptionField(frame=frame, layers=num_layers, left=int(idx[0]), right=int(idx[-1]))


def frame_lookahead(spec, num_frames):
    """Future frames each output frame waits for: ``C - 1 - p`` at chunk offset p.

    Frames of a short final chunk only wait for the frames that exist.
    """
    pos = np.arange(num_frames)
    chunk_end = np.minimum((pos // spec.chunk_size + 1) * spec.chunk_size, num_frames)
    return chunk_end - 1 - pos


def avg_lookahead(spec):
    """Exact mean lookahead over a full chunk, ``(C - 1) / 2`` frames."""
    return (spec.chunk_size - 1) / 2.0
