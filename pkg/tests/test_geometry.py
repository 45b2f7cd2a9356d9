import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsag.errors import InvalidArgument
from wsag.geometry import (
    MapIndex,
    Segment,
    build_map_index,
    cell_to_segment,
    pool_proposal_features,
    resample_clips,
    segment_iou,
    validity_mask,
)


def finite_times(min_value=0.0, max_value=1e6):
    return st.floats(min_value=min_value, max_value=max_value,
                     allow_nan=False, allow_infinity=False)


@st.composite
def segments(draw):
    start = draw(finite_times(0.0, 1e5))
    length = draw(st.floats(min_value=1e-6, max_value=1e5,
                            allow_nan=False, allow_infinity=False))
    return Segment(start=start, end=start + length)


class TestSegment:
    def test_length(self):
        assert Segment(2.0, 5.5).length == 3.5

    def test_rejects_reversed(self):
        with pytest.raises(InvalidArgument):
            Segment(3.0, 3.0)
        with pytest.raises(InvalidArgument):
            Segment(4.0, 1.0)

    def test_rejects_negative_start(self):
        with pytest.raises(InvalidArgument):
            Segment(-0.1, 1.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidArgument):
            Segment(0.0, math.inf)
        with pytest.raises(InvalidArgument):
            Segment(math.nan, 1.0)

    def test_frozen(self):
        s = Segment(0.0, 1.0)
        with pytest.raises(AttributeError):
            s.start = 2.0


class TestSegmentIou:
    def test_disjoint_is_zero(self):
        assert segment_iou(Segment(0, 1), Segment(2, 3)) == 0.0

    def test_touching_is_zero(self):
        assert segment_iou(Segment(0, 1), Segment(1, 2)) == 0.0

    def test_identical_is_one(self):
        assert segment_iou(Segment(3, 7), Segment(3, 7)) == 1.0

    def test_half_overlap(self):
        # [0,4) vs [2,6): inter 2, union 6
        assert segment_iou(Segment(0, 4), Segment(2, 6)) == pytest.approx(1 / 3)

    def test_containment(self):
        assert segment_iou(Segment(0, 8), Segment(2, 4)) == pytest.approx(0.25)

    @given(segments(), segments())
    @settings(max_examples=200)
    def test_symmetric_and_bounded(self, a, b):
        v = segment_iou(a, b)
        assert v == segment_iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(segments())
    def test_self_iou_is_one(self, a):
        assert segment_iou(a, a) == pytest.approx(1.0)


class TestMapIndex:
    def test_cell_count_and_order(self):
        idx = build_map_index(4, 8.0)
        assert len(idx.valid_cells) == 10
        assert idx.valid_cells[:5] == ((0, 0), (0, 1), (0, 2), (0, 3), (1, 1))
        assert idx.valid_cells[-1] == (3, 3)
        assert idx.clip_length == 2.0

    def test_single_clip(self):
        idx = build_map_index(1, 5.0)
        assert idx.valid_cells == ((0, 0),)

    def test_rejects_bad_args(self):
        with pytest.raises(InvalidArgument):
            build_map_index(0, 4.0)
        with pytest.raises(InvalidArgument):
            build_map_index(4, 0.0)
        with pytest.raises(InvalidArgument):
            build_map_index(4, math.inf)

    def test_validity_mask(self):
        m = validity_mask(3)
        expect = np.array([[1, 1, 1], [0, 1, 1], [0, 0, 1]], dtype=bool)
        assert np.array_equal(m, expect)

    def test_cell_to_segment(self):
        idx = build_map_index(16, 64.0)
        assert cell_to_segment((0, 0), idx) == Segment(0.0, 4.0)
        assert cell_to_segment((3, 7), idx) == Segment(12.0, 32.0)
        assert cell_to_segment((15, 15), idx) == Segment(60.0, 64.0)

    def test_cell_to_segment_rejects_lower_triangle(self):
        idx = build_map_index(4, 8.0)
        with pytest.raises(InvalidArgument):
            cell_to_segment((2, 1), idx)
        with pytest.raises(InvalidArgument):
            cell_to_segment((0, 4), idx)

    def test_every_cell_round_trips(self):
        idx = build_map_index(7, 21.0)
        for (i, j) in idx.valid_cells:
            seg = cell_to_segment((i, j), idx)
            assert seg.start == pytest.approx(i * 3.0)
            assert seg.end == pytest.approx((j + 1) * 3.0)


class TestResampleClips:
    def test_identity_when_sizes_match(self):
        raw = np.arange(12.0).reshape(4, 3)
        out = resample_clips(raw, 4)
        assert np.array_equal(out, raw)
        assert out is not raw

    def test_downsample_means(self):
        raw = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
        out = resample_clips(raw, 3)
        # bins by floor(t*3/6): rows {0,1}, {2,3}, {4,5}
        assert np.allclose(out[:, 0], [0.5, 2.5, 4.5])

    def test_uneven_downsample(self):
        raw = np.arange(5.0)[:, None]
        out = resample_clips(raw, 2)
        # floor(t*2/5) for t=0..4 -> bins 0,0,0,1,1
        assert np.allclose(out[:, 0], [1.0, 3.5])

    def test_upsample_copies_nearest(self):
        raw = np.array([[1.0], [5.0]])
        out = resample_clips(raw, 4)
        # bins of raw rows: floor(0*4/2)=0, floor(1*4/2)=2; bins 1 and 3 empty
        assert np.allclose(out[:, 0], [1.0, 1.0, 5.0, 5.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for t_rows, n in [(10, 4), (7, 3), (16, 16), (3, 8), (1, 5), (9, 2)]:
            raw = rng.standard_normal((t_rows, 3))
            out = resample_clips(raw, n)
            bins = [(t * n) // t_rows for t in range(t_rows)]
            last = None
            for b in range(n):
                rows = [t for t in range(t_rows) if bins[t] == b]
                if rows:
                    expect = raw[rows].mean(axis=0)
                    last = max(rows)
                else:
                    nearest = (b * t_rows + n - 1) // n - 1
                    expect = raw[nearest]
                assert np.allclose(out[b], expect), (t_rows, n, b)

    def test_rejects_bad_input(self):
        with pytest.raises(InvalidArgument):
            resample_clips(np.zeros((0, 3)), 2)
        with pytest.raises(InvalidArgument):
            resample_clips(np.zeros(5), 2)
        with pytest.raises(InvalidArgument):
            resample_clips(np.zeros((4, 2)), 0)


class TestPoolProposalFeatures:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for n in (1, 2, 5, 8):
            idx = build_map_index(n, float(n))
            clips = rng.standard_normal((n, 4))
            pooled = pool_proposal_features(clips, idx)
            for i in range(n):
                for j in range(n):
                    if i <= j:
                        assert np.allclose(pooled[i, j], clips[i:j + 1].mean(axis=0),
                                           atol=1e-12)
                    else:
                        assert np.all(pooled[i, j] == 0.0)

    def test_diagonal_is_exact_copy(self):
        rng = np.random.default_rng(2)
        idx = build_map_index(6, 6.0)
        clips = rng.standard_normal((6, 3))
        pooled = pool_proposal_features(clips, idx)
        for i in range(6):
            assert np.array_equal(pooled[i, i], clips[i])

    def test_constant_features_pool_to_constant(self):
        idx = build_map_index(5, 10.0)
        clips = np.full((5, 2), 3.25)
        pooled = pool_proposal_features(clips, idx)
        for (i, j) in idx.valid_cells:
            assert np.allclose(pooled[i, j], 3.25, atol=1e-12)

    def test_rejects_shape_mismatch(self):
        idx = build_map_index(4, 8.0)
        with pytest.raises(InvalidArgument):
            pool_proposal_features(np.zeros((3, 2)), idx)

    def test_rejects_nonfinite(self):
        idx = build_map_index(2, 4.0)
        bad = np.array([[1.0, 2.0], [np.nan, 0.0]])
        with pytest.raises(InvalidArgument):
            pool_proposal_features(bad, idx)
