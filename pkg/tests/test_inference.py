import math

import numpy as np
import pytest

from wsag.errors import InvalidArgument
from wsag.geometry import Segment, build_map_index, cell_to_segment, segment_iou
from wsag.inference import (
    Prediction,
    map_candidates,
    per_sentence_nms,
    rank_predictions,
    structure_nms,
)


def pred(s_idx, start, end, score, vid="v0", cell=-1):
    return Prediction(video_id=vid, sentence_idx=s_idx,
                      segment=Segment(start, end), score=score, cell=cell)


def brute_nms(cands, thr):
    """O(n^2) greedy reference with the documented tie rules."""
    pool = sorted(cands, key=lambda p: (-p.score, p.segment.start, p.cell))
    kept = []
    while pool:
        best = pool.pop(0)
        kept.append(best)
        pool = [p for p in pool if segment_iou(p.segment, best.segment) <= thr]
    return kept


def random_candidates(rng, s_idx=0, max_n=20, n_clips=8, ties=True):
    idx = build_map_index(n_clips, float(n_clips))
    count = int(rng.integers(1, max_n + 1))
    cells = rng.choice(len(idx.valid_cells), size=count, replace=False)
    out = []
    for c in cells:
        seg = cell_to_segment(idx.valid_cells[c], idx)
        if ties:
            # quantized scores create plenty of exact ties
            score = float(rng.integers(0, 6)) / 5.0 * 0.8 + 0.1
        else:
            score = float(rng.uniform(0.05, 0.95))
        out.append(pred(s_idx, seg.start, seg.end, score, cell=int(c)))
    return out


class TestPrediction:
    def test_validates_score(self):
        with pytest.raises(InvalidArgument):
            pred(0, 0, 1, 1.5)
        with pytest.raises(InvalidArgument):
            pred(0, 0, 1, math.nan)
        with pytest.raises(InvalidArgument):
            pred(0, 0, 1, -0.1)

    def test_validates_sentence_idx(self):
        with pytest.raises(InvalidArgument):
            pred(-1, 0, 1, 0.5)

    def test_boundary_scores_allowed(self):
        assert pred(0, 0, 1, 0.0).score == 0.0
        assert pred(0, 0, 1, 1.0).score == 1.0


class TestMapCandidates:
    def test_one_candidate_per_valid_cell(self):
        idx = build_map_index(4, 8.0)
        m = np.zeros((4, 4))
        for k, (i, j) in enumerate(idx.valid_cells):
            m[i, j] = 0.1 + 0.05 * k
        cands = map_candidates(m, idx, "vid7", 3)
        assert len(cands) == len(idx.valid_cells)
        for k, c in enumerate(cands):
            i, j = idx.valid_cells[k]
            assert c.cell == k
            assert c.video_id == "vid7"
            assert c.sentence_idx == 3
            assert c.segment == cell_to_segment((i, j), idx)
            assert c.score == pytest.approx(m[i, j])


class TestPerSentenceNms:
    def test_single_kept(self):
        c = [pred(0, 0, 4, 0.9)]
        assert per_sentence_nms(c, 0.5) == c

    def test_disjoint_kept(self):
        c = [pred(0, 0, 4, 0.9), pred(0, 8, 12, 0.5)]
        assert len(per_sentence_nms(c, 0.5)) == 2

    def test_spec_overlap_case(self):
        # [0,4] at 0.9 vs [1,4] at 0.8, IoU 0.75 > 0.5: only the first stays
        c = [pred(0, 0, 4, 0.9), pred(0, 1, 4, 0.8)]
        kept = per_sentence_nms(c, 0.5)
        assert len(kept) == 1
        assert kept[0].score == 0.9

    def test_boundary_iou_is_kept(self):
        # IoU exactly at the threshold is NOT discarded (strictly greater only)
        c = [pred(0, 0, 4, 0.9), pred(0, 2, 6, 0.8)]  # IoU = 1/3
        kept = per_sentence_nms(c, 1 / 3)
        assert len(kept) == 2

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            cands = random_candidates(rng)
            thr = float(rng.choice([0.2, 1 / 3, 0.5, 0.7]))
            got = per_sentence_nms(cands, thr)
            want = brute_nms(cands, thr)
            assert got == want

    def test_pairwise_iou_bound(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            kept = per_sentence_nms(random_candidates(rng), 0.5)
            for a in range(len(kept)):
                for b in range(a + 1, len(kept)):
                    assert segment_iou(kept[a].segment, kept[b].segment) <= 0.5 + 1e-12

    def test_rejects_mixed_sentences(self):
        with pytest.raises(InvalidArgument):
            per_sentence_nms([pred(0, 0, 4, 0.5), pred(1, 0, 4, 0.5)], 0.5)


class TestRankPredictions:
    def test_single_sentence_sorted(self):
        kept = [[pred(0, 4, 8, 0.3), pred(0, 0, 4, 0.9)]]
        ranked = rank_predictions(kept)
        assert [p.score for p in ranked] == [0.9, 0.3]

    def test_tie_lower_sentence_first(self):
        kept = [[pred(1, 0, 4, 0.7)], [pred(0, 8, 12, 0.7)]]
        ranked = rank_predictions(kept)
        assert [p.sentence_idx for p in ranked] == [0, 1]

    def test_spec_merge_case(self):
        kept = [[pred(1, 0, 4, 0.7)], [pred(2, 0, 4, 0.9), pred(2, 8, 12, 0.3)]]
        ranked = rank_predictions(kept)
        assert [(p.sentence_idx, p.score) for p in ranked] == \
            [(2, 0.9), (1, 0.7), (2, 0.3)]

    def test_tie_by_start_within_sentence(self):
        kept = [[pred(0, 8, 12, 0.5), pred(0, 0, 4, 0.5)]]
        ranked = rank_predictions(kept)
        assert [p.segment.start for p in ranked] == [0.0, 8.0]


class TestStructureNms:
    def test_appendix_hand_case(self):
        # i=[0,2] p=0.6 pending, j=[5,8] selected, const=0.5:
        # IoU_bad = (5-0 + 2-8 clamped) / (8-0) = 5/8; 0.6*exp(-0.625^2/0.5)
        preds = [pred(1, 5, 8, 0.9), pred(0, 0, 2, 0.6)]
        out = structure_nms(preds, const=0.5)
        assert out[0].score == 0.9
        expect = 0.6 * math.exp(-(0.625 ** 2) / 0.5)
        assert out[1].score == pytest.approx(expect, abs=1e-9)
        assert abs(out[1].score - 0.27470001706296854) < 1e-9

    def test_identical_segments_unpenalized(self):
        preds = [pred(1, 2, 6, 0.9), pred(0, 2, 6, 0.6)]
        out = structure_nms(preds, const=0.5)
        assert out[1].score == 0.6

    def test_only_preceding_sentences_penalized(self):
        # the pending prediction belongs to a LATER sentence: untouched
        preds = [pred(0, 5, 8, 0.9), pred(1, 0, 2, 0.6)]
        out = structure_nms(preds, const=0.5)
        assert [p.score for p in out] == [0.9, 0.6]

    def test_scores_monotone_nonincreasing_vs_input(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            cands = []
            for s in range(3):
                cands.extend(random_candidates(rng, s_idx=s, max_n=6))
            ranked = rank_predictions([
                [c for c in cands if c.sentence_idx == s] for s in range(3)])
            out = structure_nms(ranked, const=0.5)
            before = {(p.sentence_idx, p.segment.start, p.segment.end, p.cell): p.score
                      for p in ranked}
            for p in out:
                key = (p.sentence_idx, p.segment.start, p.segment.end, p.cell)
                assert p.score <= before[key] + 1e-15

    def test_large_const_preserves_plain_ranking_order(self):
        # with distinct scores the ~1e-10 residual penalty at const=1e9
        # cannot reorder anything; exact ties are excluded because shaving
        # a tied score by 1e-10 legitimately breaks the tie
        rng = np.random.default_rng(13)
        for _ in range(20):
            cands = []
            for s in range(3):
                cands.extend(random_candidates(rng, s_idx=s, max_n=6, ties=False))
            ranked = rank_predictions([
                [c for c in cands if c.sentence_idx == s] for s in range(3)])
            out = structure_nms(ranked, const=1e9)
            assert [(p.sentence_idx, p.cell) for p in out] == \
                [(p.sentence_idx, p.cell) for p in ranked]
            for a, b in zip(out, ranked):
                assert abs(a.score - b.score) < 1e-9

    def test_emitted_scores_nonincreasing_sequence(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            cands = []
            for s in range(4):
                cands.extend(random_candidates(rng, s_idx=s, max_n=5))
            ranked = rank_predictions([
                [c for c in cands if c.sentence_idx == s] for s in range(4)])
            out = structure_nms(ranked, const=0.3)
            scores = [p.score for p in out]
            assert all(scores[k] >= scores[k + 1] - 1e-15
                       for k in range(len(scores) - 1))

    def test_top_k_truncates(self):
        preds = rank_predictions([[pred(s, 4 * s, 4 * s + 4, 0.9 - 0.1 * s)]
                                  for s in range(5)])
        out = structure_nms(preds, const=0.5, top_k=2)
        assert len(out) == 2

    def test_order_violation_only_mode(self):
        # pending i (sentence 0) STARTS BEFORE selected j (sentence 1):
        # no order violation, so no penalty in that mode; the default mode
        # still penalizes the end overhang
        preds = [pred(1, 4, 8, 0.9), pred(0, 0, 12, 0.6)]
        strict = structure_nms(preds, const=0.5)
        lenient = structure_nms(preds, const=0.5, order_violation_only=True)
        assert lenient[1].score == 0.6
        assert strict[1].score < 0.6

    def test_penalty_compounds_over_selections(self):
        # one early pending prediction, two later-sentence selections that
        # each overhang it: penalties multiply
        preds = [pred(2, 8, 12, 0.9), pred(1, 8, 12, 0.8), pred(0, 0, 2, 0.6)]
        out = structure_nms(preds, const=0.5)
        i_bad = (8 - 0) / (12 - 0)  # same geometry vs both selections
        expect = 0.6 * math.exp(-i_bad ** 2 / 0.5) ** 2
        got = [p for p in out if p.sentence_idx == 0][0]
        assert got.score == pytest.approx(expect, abs=1e-12)

    def test_rejects_bad_const(self):
        with pytest.raises(InvalidArgument):
            structure_nms([pred(0, 0, 1, 0.5)], const=0.0)
        with pytest.raises(InvalidArgument):
            structure_nms([pred(0, 0, 1, 0.5)], const=math.inf)

    def test_rejects_negative_top_k(self):
        with pytest.raises(InvalidArgument):
            structure_nms([pred(0, 0, 1, 0.5)], const=0.5, top_k=-1)
