"""The scoring network over 2D proposal maps, with analytic gradients.

Pipeline per (video, article) pair:

    pooled cell features                           (N, N, d_v)
      -> 2 masked 3x3 convs, ReLU between          video context F^M
      -> affine video projection, masked           (N, N, d_h)
    sentence embedding
      -> affine text projection                    (d_h,)
    fused map = text_proj * video_proj             elementwise, per sentence
      -> 3 masked 3x3 convs, ReLU between          (N, N, d_h)
      -> linear classifier -> logistic             score map in (0, 1)

Invalid (below-diagonal) cells are zeroed before and after every convolution
and in the final score maps. All parameters live in one flat float64 vector
whose field order is fixed by ParamLayout; that order is also the checkpoint
serialization order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import InvalidArgument, NumericFault
from .geometry import MapIndex, pool_proposal_features, validity_mask

PRE_CONV_LAYERS = 2
POST_CONV_LAYERS = 3


class ParamLayout:
    """Fixed field order and flat-vector offsets for all learnable weights."""

    def __init__(self, d_v: int, d_s: int, d_h: int):
        for name, val in (("d_v", d_v), ("d_s", d_s), ("d_h", d_h)):
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {val!r}")
        self.d_v, self.d_s, self.d_h = int(d_v), int(d_s), int(d_h)
        fields: list[tuple[str, tuple[int, ...]]] = [
            ("w_v", (d_h, d_v)),
            ("b_v", (d_h,)),
            ("w_s", (d_h, d_s)),
            ("b_s", (d_h,)),
        ]
        for k in range(PRE_CONV_LAYERS):
            fields.append((f"pre{k}_w", (3, 3, d_v, d_v)))
            fields.append((f"pre{k}_b", (d_v,)))
        for k in range(POST_CONV_LAYERS):
            fields.append((f"post{k}_w", (3, 3, d_h, d_h)))
            fields.append((f"post{k}_b", (d_h,)))
        fields.append(("cls_w", (d_h,)))
        fields.append(("cls_b", (1,)))
        self.fields = tuple(fields)
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        off = 0
        for name, shape in self.fields:
            size = int(np.prod(shape))
            self.slices[name] = slice(off, off + size)
            self.shapes[name] = shape
            off += size
        self.size = off

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        return theta[self.slices[name]].reshape(self.shapes[name])

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.view(theta, name) for name, _ in self.fields}

    def __eq__(self, other):
        return (isinstance(other, ParamLayout)
                and (self.d_v, self.d_s, self.d_h) == (other.d_v, other.d_s, other.d_h))


@dataclass
class ModelParams:
    """All learnable weights as one flat float64 vector plus its layout."""

    layout: ParamLayout
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.layout.size,):
            raise InvalidArgument(
                f"parameter vector has {self.theta.shape}, layout wants ({self.layout.size},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise InvalidArgument("parameters must be finite")

    @property
    def d_v(self):
        return self.layout.d_v

    @property
    def d_s(self):
        return self.layout.d_s

    @property
    def d_h(self):
        return self.layout.d_h

    def tensors(self) -> dict[str, np.ndarray]:
        return self.layout.unpack(self.theta)

    def copy(self) -> "ModelParams":
        return ModelParams(self.layout, self.theta.copy())


def init_params(d_v: int, d_s: int, d_h: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, drawn in layout order.

    Each weight tensor uses uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    convolution fans count the 3x3 receptive field.
    """
    layout = ParamLayout(d_v, d_s, d_h)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size, dtype=np.float64)
    fans = {
        "w_v": (d_v, d_h),
        "w_s": (d_s, d_h),
        "cls_w": (d_h, 1),
    }
    for k in range(PRE_CONV_LAYERS):
        fans[f"pre{k}_w"] = (9 * d_v, 9 * d_v)
    for k in range(POST_CONV_LAYERS):
        fans[f"post{k}_w"] = (9 * d_h, 9 * d_h)
    for name, shape in layout.fields:
        if name in fans:
            fan_in, fan_out = fans[name]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            layout.view(theta, name)[...] = rng.uniform(-a, a, size=shape)
        # biases stay zero
    return ModelParams(layout, theta)


@dataclass
class ForwardCache:
    """Every intermediate needed by backward, in the dtype of the forward pass."""

    params: ModelParams
    index: MapIndex
    mask: np.ndarray          # (N, N) in compute dtype
    dtype: np.dtype
    sentences: np.ndarray     # (S, d_s)
    x0: np.ndarray            # (1, N, N, d_v) pooled, masked
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray            # video context output
    vproj: np.ndarray         # (N, N, d_h) masked
    sproj: np.ndarray         # (S, d_h)
    fused: np.ndarray         # (S, N, N, d_h)
    z3: np.ndarray
    a3: np.ndarray
    z4: np.ndarray
    a4: np.ndarray
    z5: np.ndarray
    scores: np.ndarray        # (S, N, N) masked
    consumed: bool = field(default=False)


def _check_finite(arr: np.ndarray, layer: str):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(layer)


def forward(params: ModelParams, clips: np.ndarray, sentences,
            index: MapIndex, dtype=np.float64):
    """Score every valid proposal cell against every sentence.

    Args:
        params: model weights.
        clips: (N, d_v) clip features, N = index.num_clips.
        sentences: (S, d_s) sentence embeddings, S >= 1.
        index: map geometry.
        dtype: compute precision (float64 default, float32 optional).

    Returns:
        (score_maps, cache): score_maps is a list of S (N, N) arrays with
        valid cells in (0, 1) and invalid cells exactly 0; cache feeds
        backward().
    """
    dtype = np.dtype(dtype)
    sents = np.asarray(sentences, dtype=dtype)
    if sents.ndim != 2 or sents.shape[0] < 1:
        raise InvalidArgument(f"sentences must be a nonempty 2D array, got shape {sents.shape}")
    if sents.shape[1] != params.d_s:
        raise InvalidArgument(
            f"sentence dim {sents.shape[1]} does not match model d_s={params.d_s}"
        )
    if not np.all(np.isfinite(sents)):
        raise InvalidArgument("sentence embeddings must be finite")
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 2 or clips.shape[1] != params.d_v:
        raise InvalidArgument(
            f"clip features must be (N, {params.d_v}), got shape {clips.shape}"
        )

    n = index.num_clips
    mask = validity_mask(n).astype(dtype)
    p = {k: v.astype(dtype, copy=False) for k, v in params.tensors().items()}

    pooled = pool_proposal_features(clips, index).astype(dtype)
    x0 = pooled[None]
    _check_finite(x0, "proposal_pooling")

    z1 = kernels.conv3x3_forward(x0, p["pre0_w"], p["pre0_b"], mask)
    a1 = np.maximum(z1, 0)
    z2 = kernels.conv3x3_forward(a1, p["pre1_w"], p["pre1_b"], mask)
    _check_finite(z2, "video_conv_stack")

    vproj = (z2[0] @ p["w_v"].T + p["b_v"]) * mask[:, :, None]
    _check_finite(vproj, "video_projection")
    sproj = sents @ p["w_s"].T + p["b_s"]
    _check_finite(sproj, "text_projection")

    fused = sproj[:, None, None, :] * vproj[None]
    _check_finite(fused, "fusion")

    z3 = kernels.conv3x3_forward(fused, p["post0_w"], p["post0_b"], mask)
    a3 = np.maximum(z3, 0)
    z4 = kernels.conv3x3_forward(a3, p["post1_w"], p["post1_b"], mask)
    a4 = np.maximum(z4, 0)
    z5 = kernels.conv3x3_forward(a4, p["post2_w"], p["post2_b"], mask)
    _check_finite(z5, "fused_conv_stack")

    logits = z5 @ p["cls_w"] + p["cls_b"][0]
    scores = expit(logits) * mask
    _check_finite(scores, "classifier")

    cache = ForwardCache(
        params=params, index=index, mask=mask, dtype=dtype, sentences=sents,
        x0=x0, z1=z1, a1=a1, z2=z2, vproj=vproj, sproj=sproj, fused=fused,
        z3=z3, a3=a3, z4=z4, a4=a4, z5=z5, scores=scores,
    )
    return [scores[k] for k in range(scores.shape[0])], cache


def backward(cache: ForwardCache, upstream) -> np.ndarray:
    """Exact gradient of sum_k <upstream_k, scores_k> with respect to theta.

    Args:
        cache: the ForwardCache from a matching forward call.
        upstream: per-cell loss gradients, list of S (N, N) arrays or one
            (S, N, N) array. Invalid cells contribute nothing.

    Returns:
        Flat float64 gradient vector in ParamLayout order.
    """
    if isinstance(upstream, (list, tuple)):
        up = np.stack([np.asarray(u) for u in upstream])
    else:
        up = np.asarray(upstream)
    s_count, n = cache.scores.shape[0], cache.index.num_clips
    if up.shape != (s_count, n, n):
        raise InvalidArgument(
            f"upstream shape {up.shape} does not match cached scores {(s_count, n, n)}"
        )
    up = up.astype(cache.dtype, copy=False)
    mask = cache.mask
    p = {k: v.astype(cache.dtype, copy=False) for k, v in cache.params.tensors().items()}
    layout = cache.params.layout
    grad = np.zeros(layout.size, dtype=np.float64)

    u = up * mask
    glogits = u * cache.scores * (1.0 - cache.scores)

    dh = layout.d_h
    z5_flat = cache.z5.reshape(-1, dh)
    layout.view(grad, "cls_w")[...] = z5_flat.T @ glogits.ravel()
    layout.view(grad, "cls_b")[...] = glogits.sum()
    g_z5 = glogits[..., None] * p["cls_w"]

    g_a4, gw, gb = kernels.conv3x3_backward(cache.a4, p["post2_w"], mask, g_z5)
    layout.view(grad, "post2_w")[...] = gw
    layout.view(grad, "post2_b")[...] = gb
    g_z4 = g_a4 * (cache.z4 > 0)

    g_a3, gw, gb = kernels.conv3x3_backward(cache.a3, p["post1_w"], mask, g_z4)
    layout.view(grad, "post1_w")[...] = gw
    layout.view(grad, "post1_b")[...] = gb
    g_z3 = g_a3 * (cache.z3 > 0)

    g_fused, gw, gb = kernels.conv3x3_backward(cache.fused, p["post0_w"], mask, g_z3)
    layout.view(grad, "post0_w")[...] = gw
    layout.view(grad, "post0_b")[...] = gb

    g_sproj = (g_fused * cache.vproj[None]).sum(axis=(1, 2))
    g_vproj = (g_fused * cache.sproj[:, None, None, :]).sum(axis=0)

    layout.view(grad, "w_s")[...] = g_sproj.T @ cache.sentences
    layout.view(grad, "b_s")[...] = g_sproj.sum(axis=0)

    vfeat = cache.z2[0]
    layout.view(grad, "w_v")[...] = g_vproj.reshape(-1, dh).T @ vfeat.reshape(-1, layout.d_v)
    layout.view(grad, "b_v")[...] = g_vproj.sum(axis=(0, 1))

    g_vfeat = g_vproj @ p["w_v"]
    g_a1, gw, gb = kernels.conv3x3_backward(cache.a1, p["pre1_w"], mask, g_vfeat[None])
    layout.view(grad, "pre1_w")[...] = gw
    layout.view(grad, "pre1_b")[...] = gb
    g_z1 = g_a1 * (cache.z1 > 0)

    _, gw, gb = kernels.conv3x3_backward(cache.x0, p["pre0_w"], mask, g_z1)
    layout.view(grad, "pre0_w")[...] = gw
    layout.view(grad, "pre0_b")[...] = gb
    return grad
