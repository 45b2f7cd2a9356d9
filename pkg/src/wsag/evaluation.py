"""Retrieval metrics over ranked segment predictions.

recall_at_k scores annotated sentences directly. rc_at_k scores low-level
sentences against their parent's segments, where containment counts as a hit
no matter the IoU. order_agreement measures how often segment start order
matches sentence order. Dataset numbers are unweighted means over
video-article pairs.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .article import Hierarchy
from .errors import InvalidArgument, UndefinedMetric
from .geometry import Segment, segment_iou
from .inference import Prediction


@dataclass
class GroundTruth:
    """Annotated segments per (video id, sentence index)."""

    segments: dict[tuple[str, int], list[Segment]] = field(default_factory=dict)

    def add(self, video_id: str, sentence_idx: int, segment: Segment) -> None:
        self.segments.setdefault((video_id, sentence_idx), []).append(segment)

    def for_video(self, video_id: str) -> dict[int, list[Segment]]:
        return {sidx: list(segs) for (vid, sidx), segs in self.segments.items()
                if vid == video_id}


def _check_k(k: int) -> int:
    if k < 1:
        raise InvalidArgument(f"K must be >= 1, got {k}")
    return int(k)


def _hit(pred: Segment, gt: Segment, iou_thr: float, containment: bool) -> bool:
    if containment and gt.start <= pred.start and pred.end <= gt.end:
        return True
    return segment_iou(pred, gt) > iou_thr


def recall_at_k(ranked: Sequence[Prediction], gt: Mapping[int, Sequence[Segment]],
                k: int, iou_thr: float) -> float:
    """Fraction of GT segments recalled by the top-K predictions of one pair.

    A GT segment counts as recalled when some top-K prediction for the same
    sentence has IoU strictly above iou_thr. Raises UndefinedMetric when the
    pair carries no GT segments; dataset aggregation excludes such pairs.
    """
    k = _check_k(k)
    top = ranked[:k]
    total = sum(len(segs) for segs in gt.values())
    if total == 0:
        raise UndefinedMetric("pair has no ground-truth segments")
    recalled = 0
    for sidx, segs in gt.items():
        preds = [p.segment for p in top if p.sentence_idx == sidx]
        for g in segs:
            if any(_hit(ps, g, iou_thr, containment=False) for ps in preds):
                recalled += 1
    return recalled / total


def _pseudo_gt(gt: Mapping[int, Sequence[Segment]],
               hierarchy: Hierarchy) -> dict[int, list[Segment]]:
    # Low-level sentences inherit the parent's segments; parents without
    # annotations contribute nothing and their children are excluded.
    out: dict[int, list[Segment]] = {}
    for parent, children in hierarchy.children.items():
        segs = list(gt.get(parent, ()))
        if not segs:
            continue
        for child in children:
            out[child] = segs
    return out


def rc_at_k(ranked: Sequence[Prediction], gt: Mapping[int, Sequence[Segment]],
            hierarchy: Hierarchy, k: int, iou_thr: float) -> float:
    """recall_at_k over low-level sentences with parent segments as pseudo-GT.

    Identical matching rule except a prediction entirely inside a pseudo-GT
    segment hits regardless of IoU.
    """
    k = _check_k(k)
    pseudo = _pseudo_gt(gt, hierarchy)
    total = sum(len(segs) for segs in pseudo.values())
    if total == 0:
        raise UndefinedMetric("no low-level sentence has an annotated parent")
    top = ranked[:k]
    recalled = 0
    for sidx, segs in pseudo.items():
        preds = [p.segment for p in top if p.sentence_idx == sidx]
        for g in segs:
            if any(_hit(ps, g, iou_thr, containment=True) for ps in preds):
                recalled += 1
    return recalled / total


def rc_precision(ranked: Sequence[Prediction], gt: Mapping[int, Sequence[Segment]],
                 hierarchy: Hierarchy, k: int, iou_thr: float) -> float:
    """Fraction of top-K low-level predictions that land inside (or overlap
    past iou_thr with) their sentence's pseudo-GT."""
    k = _check_k(k)
    pseudo = _pseudo_gt(gt, hierarchy)
    top = [p for p in ranked[:k] if p.sentence_idx in pseudo]
    if not top:
        raise UndefinedMetric("no top-K prediction targets a qualifying sentence")
    good = sum(1 for p in top
               if any(_hit(p.segment, g, iou_thr, containment=True)
                      for g in pseudo[p.sentence_idx]))
    return good / len(top)


def order_agreement(instances_per_video: Iterable[Sequence[tuple[int, Segment]]]) -> float:
    """Percentage of within-video instance pairs whose start order matches
    their sentence order.

    Pairs with equal starts or equal sentence indices are skipped; pairs are
    pooled over all videos. Raises UndefinedMetric when nothing is countable.
    """
    concordant = 0
    countable = 0
    for instances in instances_per_video:
        inst = list(instances)
        for a in range(len(inst)):
            for b in range(a + 1, len(inst)):
                si, gi = inst[a]
                sj, gj = inst[b]
                if si == sj or gi.start == gj.start:
                    continue
                countable += 1
                if (si - sj) * (gi.start - gj.start) > 0:
                    concordant += 1
    if countable == 0:
        raise UndefinedMetric("no comparable instance pairs")
    return 100.0 * concordant / countable


@dataclass
class PairEval:
    """One video-article pair ready for scoring."""

    video_id: str
    task_id: str
    ranked: list[Prediction]
    gt: dict[int, list[Segment]]
    hierarchy: Hierarchy


@dataclass
class DatasetReport:
    recall: dict[tuple[int, float], float]
    rc: dict[tuple[int, float], float | None]
    rc_prec: dict[tuple[int, float], float | None]
    order_by_task: dict[str, float | None]
    num_pairs: int
    skipped_no_gt: int


def evaluate_dataset(pairs: Sequence[PairEval], ks: Sequence[int],
                     iou_thrs: Sequence[float]) -> DatasetReport:
    """Macro-average every metric over pairs for each (K, IoU) setting.

    Pairs without GT are excluded from recall (their count is reported);
    rc entries are None when no pair defines them. Order agreement is
    computed per task from the GT instances, None for undefined tasks.
    """
    settings = [(int(k), float(t)) for k in ks for t in iou_thrs]
    recall: dict[tuple[int, float], float] = {}
    rc: dict[tuple[int, float], float | None] = {}
    rcp: dict[tuple[int, float], float | None] = {}
    skipped = 0
    for k, thr in settings:
        r_vals, rc_vals, rcp_vals = [], [], []
        skip = 0
        for pe in pairs:
            try:
                r_vals.append(recall_at_k(pe.ranked, pe.gt, k, thr))
            except UndefinedMetric:
                skip += 1
            try:
                rc_vals.append(rc_at_k(pe.ranked, pe.gt, pe.hierarchy, k, thr))
            except UndefinedMetric:
                pass
            try:
                rcp_vals.append(rc_precision(pe.ranked, pe.gt, pe.hierarchy, k, thr))
            except UndefinedMetric:
                pass
        skipped = skip
        recall[(k, thr)] = sum(r_vals) / len(r_vals) if r_vals else float("nan")
        rc[(k, thr)] = sum(rc_vals) / len(rc_vals) if rc_vals else None
        rcp[(k, thr)] = sum(rcp_vals) / len(rcp_vals) if rcp_vals else None

    by_task: dict[str, list[PairEval]] = {}
    for pe in pairs:
        by_task.setdefault(pe.task_id, []).append(pe)
    order: dict[str, float | None] = {}
    for task in sorted(by_task):
        videos = [[(sidx, seg) for sidx, segs in sorted(pe.gt.items())
                   for seg in segs] for pe in by_task[task]]
        try:
            order[task] = order_agreement(videos)
        except UndefinedMetric:
            order[task] = None
    return DatasetReport(recall=recall, rc=rc, rc_prec=rcp,
                         order_by_task=order, num_pairs=len(pairs),
                         skipped_no_gt=skipped)


def format_report(report: DatasetReport) -> str:
    """Render the dataset report as an aligned text table."""
    lines = []
    lines.append(f"pairs evaluated: {report.num_pairs}"
                 f"  (no-GT pairs excluded from recall: {report.skipped_no_gt})")
    lines.append("")
    lines.append(f"{'metric':<14}{'K':>5}{'IoU':>7}{'value':>12}")
    lines.append("-" * 38)

    def fmt(v):
        return "   n/a" if v is None else f"{v:.4f}"

    for (k, thr), v in sorted(report.recall.items()):
        lines.append(f"{'R@K':<14}{k:>5}{thr:>7.2f}{fmt(v):>12}")
    for (k, thr), v in sorted(report.rc.items()):
        lines.append(f"{'RC@K':<14}{k:>5}{thr:>7.2f}{fmt(v):>12}")
    for (k, thr), v in sorted(report.rc_prec.items()):
        lines.append(f"{'RC-prec@K':<14}{k:>5}{thr:>7.2f}{fmt(v):>12}")
    lines.append("")
    lines.append("order agreement by task (%):")
    for task, v in report.order_by_task.items():
        shown = "n/a" if v is None else f"{v:.2f}"
        lines.append(f"  {task:<24}{shown:>8}")
    return "\n".join(lines) + "\n"
