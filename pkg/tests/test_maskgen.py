import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttstream.exceptions import ConfigError
from ttstream.maskgen import (
    MaskSpec,
    avg_lookahead,
    build_mask,
    frame_lookahead,
    mask_from_positions,
    reachability,
    reception_field,
)


def allowed(i, j, c, h, strict=False):
    """Reference predicate, written rule by rule."""
    ci, cj = i // c, j // c
    if ci == cj:
        return True
    if cj > ci:
        return False
    if h is None:
        return True
    return i - j < h if strict else i - j <= h


histories = st.one_of(st.none(), st.integers(0, 8))


@settings(max_examples=200)
@given(st.integers(1, 24), st.integers(1, 6), histories, st.booleans())
def test_mask_equals_predicate(t, c, h, strict):
    m = build_mask(MaskSpec(c, h, strict), t)
    ref = np.array([[allowed(i, j, c, h, strict) for j in range(t)] for i in range(t)])
    assert m.dtype == bool
    assert np.array_equal(m, ref)


@given(st.integers(1, 24), st.integers(1, 6), histories)
def test_mask_structure(t, c, h):
    m = build_mask(MaskSpec(c, h), t)
    assert m.diagonal().all()
    # never look into a later chunk
    i, j = np.nonzero(m)
    assert np.all(j // c <= i // c)


def test_diagonal_only_mask():
    assert np.array_equal(build_mask(MaskSpec(1, 0), 9), np.eye(9, dtype=bool))


def test_unbounded_single_chunk_is_causal():
    assert np.array_equal(build_mask(MaskSpec(1, None), 6), np.tril(np.ones((6, 6), bool)))
    assert build_mask(MaskSpec(10, None), 6).all()


def test_example_mask_grid():
    m = build_mask(MaskSpec(2, 1), 5).astype(int)
    assert m.tolist() == [
        [1, 1, 0, 0, 0],
        [1, 1, 0, 0, 0],
        [0, 1, 1, 1, 0],
        [0, 0, 1, 1, 0],
        [0, 0, 0, 1, 1],
    ]


def test_strict_history_is_one_shorter():
    loose = build_mask(MaskSpec(1, 3), 10)
    strict = build_mask(MaskSpec(1, 3, strict_history=True), 10)
    assert np.array_equal(strict, build_mask(MaskSpec(1, 2), 10))
    assert loose.sum() > strict.sum()


def test_mask_from_positions_matches_submatrix():
    spec = MaskSpec(3, 4)
    full = build_mask(spec, 20)
    q = np.arange(9, 12)
    k = np.arange(4, 12)
    assert np.array_equal(mask_from_positions(spec, q, k), full[9:12, 4:12])


def test_infinite_history_normalised():
    assert MaskSpec(2, math.inf).history_window is None
    assert MaskSpec(2, math.inf) == MaskSpec(2, None)


@pytest.mark.parametrize("c,h", [(0, 1), (-1, 2), (1.5, 2), (2, -1), (2, 1.5)])
def test_invalid_spec(c, h):
    with pytest.raises(ConfigError):
        MaskSpec(c, h)


def test_build_mask_needs_frames():
    with pytest.raises(ValueError):
        build_mask(MaskSpec(2, 2), 0)


def test_figure_example_reception_field():
    # chunk 3, history 3: frame 9 (0-based) reaches back to 6, 3, 0 and forward to 11
    spec = MaskSpec(3, 3)
    fields = [reception_field(spec, layers, 9, 12) for layers in (1, 2, 3)]
    assert [f.left for f in fields] == [6, 3, 0]
    assert [f.right for f in fields] == [11, 11, 11]


@settings(max_examples=80)
@given(st.integers(1, 30), st.integers(1, 5), histories, st.integers(1, 4), st.data())
def test_reception_field_invariants(t, c, h, layers, data):
    spec = MaskSpec(c, h)
    frame = data.draw(st.integers(0, t - 1))
    rf = reception_field(spec, layers, frame, t)
    # right edge is pinned to the end of the frame's own chunk
    assert rf.right == min((frame // c + 1) * c, t) - 1
    # left edge matches the closure row
    row = reachability(spec, layers, t)[frame]
    assert rf.left == int(np.flatnonzero(row)[0])
    # contiguous field
    assert row[rf.left:rf.right + 1].all()
    if layers > 1:
        prev = reception_field(spec, layers - 1, frame, t)
        assert rf.left <= prev.left
        # per-layer growth is bounded by the farthest single-layer reach
        step = t if h is None else max(h, c - 1)
        assert prev.left - rf.left <= step


def test_reachability_is_matrix_power():
    spec = MaskSpec(2, 2)
    m = build_mask(spec, 11).astype(int)
    ref = np.linalg.matrix_power(m, 3) > 0
    assert np.array_equal(reachability(spec, 3, 11), ref)
    assert np.array_equal(reachability(spec, 0, 11), np.eye(11, dtype=bool))


@given(st.integers(1, 12))
def test_average_lookahead(c):
    spec = MaskSpec(c, 4)
    assert avg_lookahead(spec) == (c - 1) / 2
    look = frame_lookahead(spec, 5 * c)
    assert look.mean() == pytest.approx((c - 1) / 2)
    assert look.max() == c - 1 and look.min() == 0


def test_lookahead_partial_final_chunk():
    assert frame_lookahead(MaskSpec(4, 2), 6).tolist() == [3, 2, 1, 0, 1, 0]
