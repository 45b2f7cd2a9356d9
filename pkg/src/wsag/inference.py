"""From score maps to ranked segment predictions.

Pipeline: every valid cell becomes a candidate, per-sentence NMS prunes
overlapping segments, survivors are ranked globally, and (optionally)
Structure-NMS rescales scores of predictions that would place an earlier
sentence after a later one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgument
from .geometry import MapIndex, Segment, cell_to_segment, segment_iou


@dataclass(frozen=True)
class Prediction:
    """One scored segment for one sentence of one video.

    cell is the row-major index of the originating map cell; it is the last
    tie-breaking key so runs are reproducible. Predictions from outside a
    score map (e.g. parsed files) leave it at -1.
    """

    video_id: str
    sentence_idx: int
    segment: Segment
    score: float
    cell: int = -1

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidArgument(f"prediction score must lie in [0, 1], got {self.score}")
        if self.sentence_idx < 0:
            raise InvalidArgument(f"sentence index must be >= 0, got {self.sentence_idx}")


def map_candidates(score_map: np.ndarray, index: MapIndex, video_id: str,
                   sentence_idx: int) -> list[Prediction]:
    """All valid cells of one sentence's map as candidate predictions."""
    m = np.asarray(score_map, dtype=np.float64)
    n = index.num_clips
    if m.shape != (n, n):
        raise InvalidArgument(f"score map shape {m.shape} does not match N={n}")
    out = []
    for flat, cell in enumerate(index.valid_cells):
        out.append(Prediction(video_id, sentence_idx,
                              cell_to_segment(cell, index),
                              float(m[cell]), cell=flat))
    return out


def _greedy_key(p: Prediction):
    return (-p.score, p.segment.start, p.cell)


def per_sentence_nms(candidates: list[Prediction], iou_thr: float) -> list[Prediction]:
    """Greedy NMS within one sentence; discards overlaps with IoU > iou_thr.

    Ties on score are taken earliest-start first, then smallest cell index.
    """
    if not candidates:
        return []
    sidx = candidates[0].sentence_idx
    for c in candidates:
        if c.sentence_idx != sidx:
            raise InvalidArgument(
                f"per_sentence_nms got sentences {sidx} and {c.sentence_idx}")
    kept: list[Prediction] = []
    for cand in sorted(candidates, key=_greedy_key):
        if all(segment_iou(cand.segment, k.segment) <= iou_thr for k in kept):
            kept.append(cand)
    return kept


def _rank_key(p: Prediction):
    return (-p.score, p.sentence_idx, p.segment.start, p.cell)


def rank_predictions(kept_lists) -> list[Prediction]:
    """Merge per-sentence survivors into one global ranking.

    Score descending; ties by sentence index, then segment start.
    """
    merged = [p for lst in kept_lists for p in lst]
    return sorted(merged, key=_rank_key)


def structure_nms(ranked: list[Prediction], const: float,
                  top_k: int | None = None,
                  order_violation_only: bool = False) -> list[Prediction]:
    """Order-aware soft suppression over a ranked prediction list.

    Greedily emits the best pending prediction j; every pending prediction i
    whose sentence precedes j's in the article is rescaled by
    exp(-IoU_bad^2 / const) with

        IoU_bad = [max(l^j_s - l^i_s, 0) + max(l^i_e - l^j_e, 0)]
                  / [max(l^i_e, l^j_e) - min(l^i_s, l^j_s)]

    so segments of earlier sentences that fail to precede-or-contain the
    selected one lose score. Scores never increase. With order_violation_only
    the penalty applies only when i starts strictly after j starts.
    """
    if not math.isfinite(const) or const <= 0:
        raise InvalidArgument(f"const must be positive and finite, got {const}")
    if top_k is not None and top_k < 0:
        raise InvalidArgument(f"top_k must be >= 0, got {top_k}")
    preds = list(ranked)
    scores = [p.score for p in preds]
    pending = list(range(len(preds)))
    out: list[Prediction] = []
    limit = len(preds) if top_k is None else min(top_k, len(preds))
    while pending and len(out) < limit:
        jpos = min(range(len(pending)),
                   key=lambda t: (-scores[pending[t]],
                                  preds[pending[t]].sentence_idx,
                                  preds[pending[t]].segment.start,
                                  preds[pending[t]].cell))
        jidx = pending.pop(jpos)
        j = preds[jidx]
        out.append(replace(j, score=scores[jidx]))
        js, je = j.segment.start, j.segment.end
        for iidx in pending:
            i = preds[iidx]
            if i.sentence_idx >= j.sentence_idx:
                continue
            if order_violation_only and not i.segment.start > js:
                continue
            span = max(i.segment.end, je) - min(i.segment.start, js)
            iou_bad = (max(js - i.segment.start, 0.0)
                       + max(i.segment.end - je, 0.0)) / span
            scores[iidx] *= math.exp(-iou_bad * iou_bad / const)
    return out
