"""Finite-difference audit of the analytic gradient.

Every scalar parameter is perturbed by +epsilon and -epsilon and the central
difference of the loss is compared against the analytic gradient. A naive
sweep would rerun the whole forward pass per perturbation; instead, each
perturbation only invalidates activations downstream of its own layer, and a
single weight tap produces a structured (often single-channel) delta there.
The sweep reuses the cached prefix, applies the exact delta, and recomputes
only the suffix, batching parameters as a leading array dimension. The losses
are mathematically identical to full reruns because everything upstream of
the perturbed layer is unchanged by construction.

Two numerical hazards and how they are handled:

* Cancellation. L(+) - L(-) is of order eps * grad while L itself can be
  large, so forming the two totals first loses ~|L| * ulp, which at step 1e-5
  swamps small-gradient coordinates. When the loss offers pair_delta() the
  difference is instead taken per score cell before the reduction, which only
  loses ~|cell| * ulp.

* ReLU kinks. When a perturbation flips the sign of some pre-activation
  between the two sides, the central difference no longer estimates the
  derivative at the midpoint. Such crossings are detected exactly and those
  parameters are excluded from the reported maximum; their count and their
  own worst deviation are reported alongside so nothing is hidden.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import InvalidArgument
from .geometry import MapIndex, build_map_index, validity_mask
from .model import ModelParams, backward, forward, init_params


class WeightedScoreLoss:
    """Audit objective: fixed random-weighted sum of all score-map cells.

    Smooth in the scores, nonzero weight on every valid cell, so every
    parameter's influence on every cell is exercised.
    """

    def __init__(self, weights: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, score_maps) -> float:
        return float(np.tensordot(np.stack(score_maps), self.weights, axes=3))

    def batched(self, scores: np.ndarray) -> np.ndarray:
        # scores (P, S, N, N) -> (P,)
        return np.tensordot(scores, self.weights, axes=([1, 2, 3], [0, 1, 2]))

    def pair_delta(self, scores_plus: np.ndarray, scores_minus: np.ndarray) -> np.ndarray:
        # loss(plus) - loss(minus), differenced per cell before reducing
        return self.batched(scores_plus - scores_minus)

    def upstream(self, score_maps) -> np.ndarray:
        return self.weights


def audit_loss(index: MapIndex, n_sentences: int, seed) -> WeightedScoreLoss:
    """Weights drawn uniform from [0.5, 1.5) on valid cells, zero elsewhere."""
    n = index.num_clips
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, size=(n_sentences, n, n))
    return WeightedScoreLoss(w * validity_mask(n))


@dataclass
class GradCheckReport:
    max_rel_err: float          # over parameters with a kink-free FD interval
    max_rel_err_crossed: float  # over the excluded kink-crossing parameters
    kink_params: int            # how many parameters flipped a ReLU sign
    worst_field: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    crossed: np.ndarray


def naive_finite_difference(params: ModelParams, clips, sentences, index,
                            loss_fn, epsilon: float) -> np.ndarray:
    """Reference sweep: full forward per perturbation. For small models only."""
    numeric = np.zeros(params.layout.size)
    for k in range(params.layout.size):
        tp = params.copy()
        tp.theta[k] += epsilon
        lp = loss_fn(forward(tp, clips, sentences, index)[0])
        tp.theta[k] -= 2 * epsilon
        lm = loss_fn(forward(tp, clips, sentences, index)[0])
        numeric[k] = (lp - lm) / (2 * epsilon)
    return numeric


def _taps(src: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """All nine shifted copies of each channel of a conv input, output-masked.

    src (..., N, N, C) -> (9*C, ..., N, N) where row q = (dy*3 + dx)*C + ci
    holds src[..., x+dy-1, y+dx-1, ci] * mask[x, y]. Row q is the derivative
    field of conv output channel co at every cell w.r.t. w[dy, dx, ci, co].
    """
    n = src.shape[-2]
    c = src.shape[-1]
    lead = src.shape[:-3]
    pad = np.pad(src, [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)])
    rows = np.empty((9, c) + lead + (n, n))
    for dy in range(3):
        for dx in range(3):
            win = pad[..., dy:dy + n, dx:dx + n, :] * mask[..., None]
            rows[dy * 3 + dx] = np.moveaxis(win, -1, 0)
    return rows.reshape((9 * c,) + lead + (n, n))


class _Sweep:
    """Shared state for one staged finite-difference sweep."""

    def __init__(self, params, cache, loss_fn, epsilon, chunk_doubles):
        self.layout = params.layout
        self.p = {k: v.astype(np.float64, copy=False) for k, v in params.tensors().items()}
        self.mask = cache.mask.astype(np.float64, copy=False)
        self.eps = float(epsilon)
        self.loss = loss_fn
        self.cache = cache
        self.logits = cache.z5 @ self.p["cls_w"] + self.p["cls_b"][0]
        self.numeric = np.zeros(self.layout.size)
        self.crossed = np.zeros(self.layout.size, dtype=bool)
        s, n = cache.scores.shape[0], cache.scores.shape[1]
        self.s, self.n = s, n
        dh = self.layout.d_h
        self.chunk = max(1, int(chunk_doubles // (s * n * n * dh)))

    def field_start(self, name: str) -> int:
        return self.layout.slices[name].start

    def _pair(self, logits_plus: np.ndarray, logits_minus: np.ndarray) -> np.ndarray:
        """(L(+eps) - L(-eps)) / (2 eps) for a batch of parameters."""
        sp = expit(logits_plus) * self.mask
        sm = expit(logits_minus) * self.mask
        if hasattr(self.loss, "pair_delta"):
            delta = np.asarray(self.loss.pair_delta(sp, sm), dtype=np.float64)
        elif hasattr(self.loss, "batched"):
            delta = np.asarray(self.loss.batched(sp), dtype=np.float64) \
                - np.asarray(self.loss.batched(sm), dtype=np.float64)
        else:
            delta = np.array([self.loss(list(a)) - self.loss(list(b))
                              for a, b in zip(sp, sm)], dtype=np.float64)
        return delta / (2 * self.eps)

    def _logits_from_z5(self, z5p: np.ndarray) -> np.ndarray:
        return z5p @ self.p["cls_w"] + self.p["cls_b"][0]

    def _logits_from_z4(self, z4p: np.ndarray):
        pc, s, n = z4p.shape[:3]
        kink = np.any((z4p > 0) != (self.cache.z4 > 0), axis=(1, 2, 3, 4))
        a4p = np.maximum(z4p, 0).reshape(pc * s, n, n, -1)
        z5p = kernels.conv3x3_forward(a4p, self.p["post2_w"], self.p["post2_b"], self.mask)
        return self._logits_from_z5(z5p.reshape(z4p.shape)), kink

    def _logits_from_fused(self, fusedp: np.ndarray):
        pc, s, n = fusedp.shape[:3]
        flat = fusedp.reshape(pc * s, n, n, -1)
        z3p = kernels.conv3x3_forward(flat, self.p["post0_w"], self.p["post0_b"], self.mask)
        kink = np.any((z3p.reshape(fusedp.shape) > 0) != (self.cache.z3 > 0), axis=(1, 2, 3, 4))
        z4p = kernels.conv3x3_forward(np.maximum(z3p, 0), self.p["post1_w"],
                                      self.p["post1_b"], self.mask)
        logits, k4 = self._logits_from_z4(z4p.reshape(fusedp.shape))
        return logits, kink | k4

    def record(self, coords: np.ndarray, numeric: np.ndarray, kink=None):
        self.numeric[coords] = numeric
        if kink is not None:
            self.crossed[coords] |= kink

    def chunks(self, total: int):
        for lo in range(0, total, self.chunk):
            yield slice(lo, min(lo + self.chunk, total))


def _sweep_classifier(sw: _Sweep):
    dh = sw.layout.d_h
    fields = np.concatenate([np.moveaxis(sw.cache.z5, 3, 0),
                             np.ones((1, sw.s, sw.n, sw.n))])
    coords = np.concatenate([sw.field_start("cls_w") + np.arange(dh),
                             [sw.field_start("cls_b")]])
    for ch in sw.chunks(dh + 1):
        lp = sw.logits[None] + sw.eps * fields[ch]
        lm = sw.logits[None] - sw.eps * fields[ch]
        sw.record(coords[ch], sw._pair(lp, lm))


def _sweep_post2(sw: _Sweep):
    dh = sw.layout.d_h
    taps = _taps(sw.cache.a4, sw.mask)
    bias_field = np.broadcast_to(sw.mask, (sw.s, sw.n, sw.n))
    fields = np.concatenate([taps, bias_field[None]])
    w0, b0 = sw.field_start("post2_w"), sw.field_start("post2_b")
    for co in range(dh):
        coords = np.concatenate([w0 + np.arange(9 * dh) * dh + co, [b0 + co]])
        for ch in sw.chunks(9 * dh + 1):
            pc = coords[ch].size
            sides = []
            for sgn in (1.0, -1.0):
                z5p = np.broadcast_to(sw.cache.z5, (pc,) + sw.cache.z5.shape).copy()
                z5p[..., co] += sgn * sw.eps * fields[ch]
                sides.append(sw._logits_from_z5(z5p))
            sw.record(coords[ch], sw._pair(sides[0], sides[1]))


def _sweep_post1(sw: _Sweep):
    dh = sw.layout.d_h
    taps = _taps(sw.cache.a3, sw.mask)
    bias_field = np.broadcast_to(sw.mask, (sw.s, sw.n, sw.n))
    fields = np.concatenate([taps, bias_field[None]])
    w0, b0 = sw.field_start("post1_w"), sw.field_start("post1_b")
    for co in range(dh):
        coords = np.concatenate([w0 + np.arange(9 * dh) * dh + co, [b0 + co]])
        z4_1ch = sw.cache.z4[..., co]
        a4_1ch = sw.cache.a4[..., co]
        w_next = sw.p["post2_w"][:, :, co, :]
        for ch in sw.chunks(9 * dh + 1):
            pc = coords[ch].size
            sides, kink = [], np.zeros(pc, dtype=bool)
            for sgn in (1.0, -1.0):
                z4p = z4_1ch[None] + sgn * sw.eps * fields[ch]
                kink |= np.any((z4p > 0) != (z4_1ch > 0), axis=(1, 2, 3))
                da4 = np.maximum(z4p, 0) - a4_1ch
                dz5 = kernels.conv3x3_single_channel(
                    da4.reshape(pc * sw.s, sw.n, sw.n), w_next, sw.mask)
                z5p = sw.cache.z5[None] + dz5.reshape(pc, sw.s, sw.n, sw.n, dh)
                sides.append(sw._logits_from_z5(z5p))
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def _sweep_post0(sw: _Sweep):
    dh = sw.layout.d_h
    taps = _taps(sw.cache.fused, sw.mask)
    bias_field = np.broadcast_to(sw.mask, (sw.s, sw.n, sw.n))
    fields = np.concatenate([taps, bias_field[None]])
    w0, b0 = sw.field_start("post0_w"), sw.field_start("post0_b")
    for co in range(dh):
        coords = np.concatenate([w0 + np.arange(9 * dh) * dh + co, [b0 + co]])
        z3_1ch = sw.cache.z3[..., co]
        a3_1ch = sw.cache.a3[..., co]
        w_next = sw.p["post1_w"][:, :, co, :]
        for ch in sw.chunks(9 * dh + 1):
            pc = coords[ch].size
            sides, kink = [], np.zeros(pc, dtype=bool)
            for sgn in (1.0, -1.0):
                z3p = z3_1ch[None] + sgn * sw.eps * fields[ch]
                kink |= np.any((z3p > 0) != (z3_1ch > 0), axis=(1, 2, 3))
                da3 = np.maximum(z3p, 0) - a3_1ch
                dz4 = kernels.conv3x3_single_channel(
                    da3.reshape(pc * sw.s, sw.n, sw.n), w_next, sw.mask)
                z4p = sw.cache.z4[None] + dz4.reshape(pc, sw.s, sw.n, sw.n, dh)
                logits, k4 = sw._logits_from_z4(z4p)
                kink |= k4
                sides.append(logits)
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def _sweep_text_proj(sw: _Sweep):
    dh, ds = sw.layout.d_h, sw.layout.d_s
    sents = sw.cache.sentences.astype(np.float64, copy=False)
    # row d: d(sproj[s, h])/d(w_s[h, d]); last row: bias
    fields = np.concatenate([sents.T, np.ones((1, sw.s))])
    w0, b0 = sw.field_start("w_s"), sw.field_start("b_s")
    for h in range(dh):
        coords = np.concatenate([w0 + h * ds + np.arange(ds), [b0 + h]])
        vcol = sw.cache.vproj[..., h]
        for ch in sw.chunks(ds + 1):
            pc = coords[ch].size
            sides, kink = [], np.zeros(pc, dtype=bool)
            for sgn in (1.0, -1.0):
                fusedp = np.broadcast_to(sw.cache.fused, (pc,) + sw.cache.fused.shape).copy()
                fusedp[..., h] += sgn * sw.eps * fields[ch][:, :, None, None] * vcol
                logits, k = sw._logits_from_fused(fusedp)
                kink |= k
                sides.append(logits)
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def _sweep_video_proj(sw: _Sweep):
    dh, dv = sw.layout.d_h, sw.layout.d_v
    vfeat = sw.cache.z2[0]
    fields = np.concatenate([np.moveaxis(vfeat * sw.mask[..., None], -1, 0),
                             np.broadcast_to(sw.mask, (1, sw.n, sw.n))])
    w0, b0 = sw.field_start("w_v"), sw.field_start("b_v")
    for h in range(dh):
        coords = np.concatenate([w0 + h * dv + np.arange(dv), [b0 + h]])
        scol = sw.cache.sproj[:, h]
        for ch in sw.chunks(dv + 1):
            pc = coords[ch].size
            sides, kink = [], np.zeros(pc, dtype=bool)
            for sgn in (1.0, -1.0):
                fusedp = np.broadcast_to(sw.cache.fused, (pc,) + sw.cache.fused.shape).copy()
                fusedp[..., h] += sgn * sw.eps * fields[ch][:, None] * scol[None, :, None, None]
                logits, k = sw._logits_from_fused(fusedp)
                kink |= k
                sides.append(logits)
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def _pre_to_logits(sw: _Sweep, dvproj: np.ndarray):
    """Continue from a video-projection delta (P, N, N, d_h)."""
    vprojp = sw.cache.vproj[None] + dvproj
    fusedp = sw.cache.sproj[None, :, None, None, :] * vprojp[:, None]
    return sw._logits_from_fused(fusedp)


def _sweep_pre1(sw: _Sweep):
    dv = sw.layout.d_v
    taps = _taps(sw.cache.a1[0], sw.mask)
    fields = np.concatenate([taps, sw.mask[None]])
    w0, b0 = sw.field_start("pre1_w"), sw.field_start("pre1_b")
    for co in range(dv):
        coords = np.concatenate([w0 + np.arange(9 * dv) * dv + co, [b0 + co]])
        wv_col = sw.p["w_v"][:, co]
        for ch in sw.chunks(9 * dv + 1):
            sides, kink = [], np.zeros(coords[ch].size, dtype=bool)
            for sgn in (1.0, -1.0):
                dvproj = sgn * sw.eps * fields[ch][..., None] * wv_col
                logits, k = _pre_to_logits(sw, dvproj)
                kink |= k
                sides.append(logits)
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def _sweep_pre0(sw: _Sweep):
    dv = sw.layout.d_v
    taps = _taps(sw.cache.x0[0], sw.mask)
    fields = np.concatenate([taps, sw.mask[None]])
    w0, b0 = sw.field_start("pre0_w"), sw.field_start("pre0_b")
    for co in range(dv):
        coords = np.concatenate([w0 + np.arange(9 * dv) * dv + co, [b0 + co]])
        z1_1ch = sw.cache.z1[0, :, :, co]
        a1_1ch = sw.cache.a1[0, :, :, co]
        w_next = sw.p["pre1_w"][:, :, co, :]
        for ch in sw.chunks(9 * dv + 1):
            pc = coords[ch].size
            sides, kink = [], np.zeros(pc, dtype=bool)
            for sgn in (1.0, -1.0):
                z1p = z1_1ch[None] + sgn * sw.eps * fields[ch]
                kink |= np.any((z1p > 0) != (z1_1ch > 0), axis=(1, 2))
                da1 = np.maximum(z1p, 0) - a1_1ch
                dz2 = kernels.conv3x3_single_channel(da1, w_next, sw.mask)
                dvproj = dz2 @ sw.p["w_v"].T
                logits, k = _pre_to_logits(sw, dvproj)
                kink |= k
                sides.append(logits)
            sw.record(coords[ch], sw._pair(sides[0], sides[1]), kink)


def staged_finite_difference(params, clips, sentences, index, loss_fn,
                             epsilon, chunk_doubles=250_000):
    """Central differences for every parameter via suffix recomputation.

    Returns (numeric_grad, crossed) where crossed flags parameters whose
    perturbation flipped at least one ReLU pre-activation sign.
    """
    _, cache = forward(params, clips, sentences, index, dtype=np.float64)
    sw = _Sweep(params, cache, loss_fn, epsilon, chunk_doubles)
    _sweep_classifier(sw)
    _sweep_post2(sw)
    _sweep_post1(sw)
    _sweep_post0(sw)
    _sweep_text_proj(sw)
    _sweep_video_proj(sw)
    _sweep_pre1(sw)
    _sweep_pre0(sw)
    return sw.numeric, sw.crossed


def finite_difference_check(params: ModelParams, clips, sentences,
                            index: MapIndex, loss_fn=None, epsilon: float = 1e-5,
                            return_report: bool = False):
    """Compare the analytic gradient against central differences.

    Every scalar parameter is perturbed by +/- epsilon. Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8). The returned maximum is
    taken over coordinates whose perturbation interval does not cross a ReLU
    kink (where the central difference is a valid derivative estimate);
    crossing coordinates are counted and reported in the GradCheckReport.

    The loss object must provide upstream(score_maps) -> per-cell gradient
    (S, N, N); WeightedScoreLoss does. When loss_fn is None a seed-0 audit
    loss is used.
    """
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise InvalidArgument(f"epsilon must be positive and finite, got {epsilon}")
    sentences = np.asarray(sentences, dtype=np.float64)
    if loss_fn is None:
        loss_fn = audit_loss(index, sentences.shape[0], seed=0)
    if not hasattr(loss_fn, "upstream"):
        raise InvalidArgument("loss_fn must provide upstream(score_maps)")

    maps, cache = forward(params, clips, sentences, index, dtype=np.float64)
    analytic = backward(cache, loss_fn.upstream(maps))
    numeric, crossed = staged_finite_difference(
        params, clips, sentences, index, loss_fn, epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    smooth_rel = np.where(crossed, 0.0, rel)
    worst = int(np.argmax(smooth_rel))
    worst_field = next(name for name, _ in params.layout.fields
                       if params.layout.slices[name].stop > worst)
    report = GradCheckReport(
        max_rel_err=float(smooth_rel.max()),
        max_rel_err_crossed=float(rel[crossed].max()) if crossed.any() else 0.0,
        kink_params=int(crossed.sum()),
        worst_field=worst_field,
        analytic=analytic, numeric=numeric, rel_err=rel, crossed=crossed,
    )
    if return_report:
        return report.max_rel_err, report
    return report.max_rel_err


def audit_case(seed: int, num_clips: int = 8, d_v: int = 16, d_s: int = 16,
               d_h: int = 32, n_sentences: int = 3, duration: float = 64.0):
    """Deterministic audit instance: params, clips, sentences, index, loss."""
    index = build_map_index(num_clips, duration)
    params = init_params(d_v, d_s, d_h, seed=seed)
    rng = np.random.default_rng([seed, 1])
    clips = rng.normal(size=(num_clips, d_v))
    sentences = rng.normal(size=(n_sentences, d_s))
    loss = audit_loss(index, n_sentences, seed=[seed, 2])
    return params, clips, sentences, index, loss
