"""Training objectives: two-level MIL ranking, single-sentence filtering,
cross-sentence hierarchy loss, and their per-cell gradients.

All functions treat a score map as an N x N array whose upper triangle
(including the diagonal) holds the valid cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .article import Hierarchy
from .errors import InvalidArgument

SS_MODES = ("replace", "add")
PHASES = ("warmup", "full")


@dataclass
class HyperParams:
    """Objective and optimizer knobs. k1=None resolves per article."""

    delta: float = 0.3
    alpha: float = 0.0
    k1: int | None = None
    k2: int = 5
    ss_kernel: int = 7
    ss_threshold: float = 0.5
    lambda_mil: float = 1.0
    lambda_cs: float = 0.1
    ss_mode: str = "replace"
    nms_iou: float = 0.5
    snms_const: float = 0.5
    warmup_epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    ss_enabled: bool = False
    cs_enabled: bool = False
    cs_weight_grad: bool = False

    def __post_init__(self):
        if self.delta < 0:
            raise InvalidArgument(f"delta must be >= 0, got {self.delta}")
        if self.k1 is not None and self.k1 < 1:
            raise InvalidArgument(f"k1 must be >= 1, got {self.k1}")
        if self.k2 < 1:
            raise InvalidArgument(f"k2 must be >= 1, got {self.k2}")
        if self.ss_kernel < 1 or self.ss_kernel % 2 == 0:
            raise InvalidArgument(f"ss_kernel must be odd and >= 1, got {self.ss_kernel}")
        if not 0 <= self.ss_threshold <= 1:
            raise InvalidArgument(f"ss_threshold must lie in [0, 1], got {self.ss_threshold}")
        if self.snms_const <= 0:
            raise InvalidArgument(f"snms_const must be > 0, got {self.snms_const}")
        if self.ss_mode not in SS_MODES:
            raise InvalidArgument(f"ss_mode must be one of {SS_MODES}, got {self.ss_mode!r}")
        if self.warmup_epochs < 0:
            raise InvalidArgument(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


def resolve_k1(k1: int | None, n_sentences: int) -> int:
    """Default: keep the top 30% of sentences, at least one."""
    if k1 is None:
        return max(1, int(np.ceil(0.3 * n_sentences)))
    return k1


def _valid_values(score_map: np.ndarray):
    """Row-major valid-cell values and their (row, col) coordinates."""
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgument(f"score map must be square, got shape {m.shape}")
    rows, cols = np.triu_indices(m.shape[0])
    return m[rows, cols], rows, cols


def _topk_cells(score_map: np.ndarray, k2: int):
    """Top-k2 valid cells: (mean value, row indices, col indices).

    Ties break toward the lowest row-major cell, so the result is independent
    of any previous ordering of equal values.
    """
    if k2 < 1:
        raise InvalidArgument(f"k2 must be >= 1, got {k2}")
    vals, rows, cols = _valid_values(score_map)
    k = min(k2, vals.size)
    order = np.lexsort((np.arange(vals.size), -vals))[:k]
    return float(vals[order].mean()), rows[order], cols[order]


def sentence_video_similarity(score_map: np.ndarray, k2: int) -> float:
    """Mean of the k2 largest valid cells; all valid cells if fewer exist."""
    return _topk_cells(score_map, k2)[0]


def article_video_similarity(sent_sims, k1: int) -> list[float]:
    """The min(k1, len) largest sentence similarities, sorted descending."""
    sims = np.asarray(sent_sims, dtype=np.float64)
    if sims.size == 0:
        raise InvalidArgument("sentence similarity list must be nonempty")
    if k1 < 1:
        raise InvalidArgument(f"k1 must be >= 1, got {k1}")
    order = _top_sentence_indices(sims, k1)
    return [float(v) for v in sims[order]]


def _top_sentence_indices(sims: np.ndarray, k1: int) -> np.ndarray:
    """Descending-value selection; equal values keep the lower sentence index."""
    k = min(k1, sims.size)
    return np.lexsort((np.arange(sims.size), -sims))[:k]


def mil_loss(pos, neg_v, neg_a, delta: float) -> float:
    """Two-level MIL ranking loss over top-k1 similarity lists.

    sum_i sum_j [max(0, delta - pos_i + neg_v_j) + max(0, delta - pos_i + neg_a_j)]
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg_v = np.asarray(neg_v, dtype=np.float64)
    neg_a = np.asarray(neg_a, dtype=np.float64)
    if pos.size == 0 or neg_v.size == 0 or neg_a.size == 0:
        raise InvalidArgument("mil_loss requires nonempty similarity lists")
    hv = np.maximum(0.0, delta - pos[:, None] + neg_v[None, :])
    ha = np.maximum(0.0, delta - pos[:, None] + neg_a[None, :])
    return float(hv.sum() + ha.sum())


def _ss_keep_mask(score_map: np.ndarray, kernel: int, delta_thr: float) -> np.ndarray:
    """Boolean survival mask of the single-sentence filter."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidArgument(f"kernel must be odd and >= 1, got {kernel}")
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgument(f"score map must be square, got shape {m.shape}")
    n = m.shape[0]
    valid = np.triu(np.ones((n, n), dtype=bool))
    guarded = np.where(valid, m, -np.inf)
    local_max = ndimage.maximum_filter(guarded, size=kernel,
                                       mode="constant", cval=-np.inf)
    global_max = guarded.max()
    return valid & (guarded == local_max) & (m >= delta_thr * global_max)


def single_sentence_filter(score_map: np.ndarray, kernel: int, delta_thr: float) -> np.ndarray:
    """Keep only local peaks that are near the global maximum.

    A valid cell survives iff it equals the maximum over the kernel x kernel
    window centered on it restricted to valid cells (ties kept), and it is
    >= delta_thr times the global valid maximum. Suppressed cells become 0.
    """
    keep = _ss_keep_mask(score_map, kernel, delta_thr)
    return np.where(keep, np.asarray(score_map, dtype=np.float64), 0.0)


def cross_sentence_loss(maps, hierarchy: Hierarchy, alpha: float) -> float:
    """Hierarchy hinge: parents should outscore their children everywhere.

    sum over (parent h, child l, valid cell ij) of
    max(0, alpha - P^h_ij + P^l_ij) * P^l_ij, with the trailing weight factor
    treated as a constant under differentiation.
    """
    loss, _ = _cross_sentence_with_grads(maps, hierarchy, alpha, weight_grad=False)
    return loss


def _cross_sentence_with_grads(maps, hierarchy: Hierarchy, alpha: float,
                               weight_grad: bool):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    hierarchy.validate_indices(len(maps))
    grads = [np.zeros_like(m) for m in maps]
    total = 0.0
    for h, child in hierarchy.pairs():
        pv, rows, cols = _valid_values(maps[h])
        cv = maps[child][rows, cols]
        hinge = alpha - pv + cv
        active = hinge > 0
        hv = np.where(active, hinge, 0.0)
        total += float((hv * cv).sum())
        grads[h][rows, cols] += np.where(active, -cv, 0.0)
        if weight_grad:
            grads[child][rows, cols] += np.where(active, cv, 0.0) + hv
        else:
            grads[child][rows, cols] += np.where(active, cv, 0.0)
    return total, grads


def _mil_with_grads(pos_maps, neg_v_maps, neg_a_maps, hp: HyperParams,
                    keep_masks=None):
    """MIL loss over three map stacks plus per-cell gradients.

    keep_masks, when given, is a dict role -> list of boolean masks through
    which gradients must pass (single-sentence filtering chain rule).
    """
    roles = {"pos": pos_maps, "neg_video": neg_v_maps, "neg_article": neg_a_maps}
    sims, cells, k2eff = {}, {}, {}
    for role, maps in roles.items():
        svals, scells, seff = [], [], []
        for m in maps:
            v, r, c = _topk_cells(m, hp.k2)
            svals.append(v)
            scells.append((r, c))
            seff.append(len(r))
        sims[role] = np.array(svals)
        cells[role] = scells
        k2eff[role] = seff

    top = {}
    for role, maps in roles.items():
        k1 = resolve_k1(hp.k1, len(maps))
        top[role] = _top_sentence_indices(sims[role], k1)

    pos = sims["pos"][top["pos"]]
    nv = sims["neg_video"][top["neg_video"]]
    na = sims["neg_article"][top["neg_article"]]
    hinge_v = hp.delta - pos[:, None] + nv[None, :]
    hinge_a = hp.delta - pos[:, None] + na[None, :]
    act_v = hinge_v > 0
    act_a = hinge_a > 0
    loss = float(np.where(act_v, hinge_v, 0).sum() + np.where(act_a, hinge_a, 0).sum())

    dsim = {
        "pos": -(act_v.sum(axis=1) + act_a.sum(axis=1)).astype(np.float64),
        "neg_video": act_v.sum(axis=0).astype(np.float64),
        "neg_article": act_a.sum(axis=0).astype(np.float64),
    }
    grads = {role: [np.zeros_like(np.asarray(m, dtype=np.float64)) for m in maps]
             for role, maps in roles.items()}
    for role in roles:
        for sel_pos, sent_idx in enumerate(top[role]):
            g = dsim[role][sel_pos]
            if g == 0.0:
                continue
            r, c = cells[role][sent_idx]
            share = g / k2eff[role][sent_idx]
            gm = grads[role][sent_idx]
            if keep_masks is not None:
                keep = keep_masks[role][sent_idx]
                gm[r, c] += share * keep[r, c]
            else:
                gm[r, c] += share
    return loss, grads


def total_loss(score_maps, article, negatives, hp: HyperParams, phase: str):
    """Combined objective for one training pair.

    Args:
        score_maps: list of (N, N) maps for the positive (V, A) pair, one per
            article sentence.
        article: the positive Article (provides the hierarchy for the
            cross-sentence term).
        negatives: (neg_video_maps, neg_article_maps) score-map lists for
            (V-, A) and (V, A-).
        hp: hyperparameters; ss_enabled/cs_enabled gate the constraint terms.
        phase: "warmup" (MIL only) or "full".

    Returns:
        (total, breakdown, gradients) where breakdown has unweighted "mil"
        and "cs" terms and gradients maps role -> (S, N, N) arrays of
        d(total)/d(cell) for roles pos, neg_video, neg_article.
    """
    if phase not in PHASES:
        raise InvalidArgument(f"phase must be one of {PHASES}, got {phase!r}")
    neg_v_maps, neg_a_maps = negatives
    pos_maps = [np.asarray(m, dtype=np.float64) for m in score_maps]
    neg_v_maps = [np.asarray(m, dtype=np.float64) for m in neg_v_maps]
    neg_a_maps = [np.asarray(m, dtype=np.float64) for m in neg_a_maps]

    def zeros(maps):
        return [np.zeros_like(m) for m in maps]

    grads = {"pos": zeros(pos_maps), "neg_video": zeros(neg_v_maps),
             "neg_article": zeros(neg_a_maps)}

    roles_raw = {"pos": pos_maps, "neg_video": neg_v_maps, "neg_article": neg_a_maps}
    if hp.ss_enabled:
        keep = {role: [_ss_keep_mask(m, hp.ss_kernel, hp.ss_threshold) for m in maps]
                for role, maps in roles_raw.items()}
        filt = {role: [m * k for m, k in zip(maps, keep[role])]
                for role, maps in roles_raw.items()}
        if hp.ss_mode == "replace":
            mil_val, mil_g = _mil_with_grads(
                filt["pos"], filt["neg_video"], filt["neg_article"], hp,
                keep_masks=keep)
        else:  # add: raw term plus an equal-weight term on filtered maps
            mil_val, mil_g = _mil_with_grads(pos_maps, neg_v_maps, neg_a_maps, hp)
            ss_val, ss_g = _mil_with_grads(
                filt["pos"], filt["neg_video"], filt["neg_article"], hp,
                keep_masks=keep)
            mil_val += ss_val
            for role in mil_g:
                for a, b in zip(mil_g[role], ss_g[role]):
                    a += b
    else:
        mil_val, mil_g = _mil_with_grads(pos_maps, neg_v_maps, neg_a_maps, hp)

    for role in grads:
        for acc, g in zip(grads[role], mil_g[role]):
            acc += hp.lambda_mil * g

    cs_val = 0.0
    if phase == "full" and hp.cs_enabled:
        hierarchy = article.hierarchy()
        cs_val, cs_g = _cross_sentence_with_grads(
            pos_maps, hierarchy, hp.alpha, weight_grad=hp.cs_weight_grad)
        for acc, g in zip(grads["pos"], cs_g):
            acc += hp.lambda_cs * g

    total = hp.lambda_mil * mil_val
    if phase == "full" and hp.cs_enabled:
        total += hp.lambda_cs * cs_val
    breakdown = {"mil": mil_val, "cs": cs_val}
    gradients = {role: np.stack(g) if g else np.zeros((0,), dtype=np.float64)
                 for role, g in grads.items()}
    return total, breakdown, gradients
