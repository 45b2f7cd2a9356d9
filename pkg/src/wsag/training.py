"""Weakly supervised training: negative sampling, Adam, article subsampling,
and the epoch loop with per-epoch derived RNG streams, checkpointing, and
deterministic resume.

Randomness contract: epoch e of a run seeded s consumes exactly one stream,
np.random.default_rng([s, e]), in a fixed order (pair shuffle, then per pair:
positive-article subsample, negative draws, negative-article subsample). A
resumed run re-derives the stream for each remaining epoch, so its trajectory
is bitwise identical to the uninterrupted one.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .article import Article, Sentence
from .config import RunConfig
from .errors import InvalidArgument, NumericFault, UnsatisfiableNegative
from .formats import (append_log_record, load_checkpoint, read_features,
                      read_manifest, save_checkpoint)
from .geometry import MapIndex, build_map_index
from .losses import total_loss
from .model import ModelParams, backward, forward, init_params


@dataclass(frozen=True)
class TrainPair:
    """A positive (video, article) pair; both sides share the task."""

    video_id: str
    article_id: str
    task_id: str


@dataclass
class AdamState:
    """First/second moment estimates over the flat parameter vector."""

    t: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(t=0, m=np.zeros(size), v=np.zeros(size))


class TrainingData:
    """Features and articles indexed for the training loop.

    Videos of one task pair with that task's article. No ground truth is ever
    attached here; the trainer is weakly supervised by construction.
    """

    def __init__(self, features: dict[str, np.ndarray],
                 articles: dict[str, Article],
                 video_tasks: dict[str, str],
                 durations: dict[str, float]):
        if not features:
            raise InvalidArgument("training data needs at least one video")
        self.features = {vid: np.asarray(f, dtype=np.float64)
                         for vid, f in features.items()}
        self.articles = dict(articles)
        self.video_tasks = dict(video_tasks)
        self.durations = dict(durations)
        clip_counts = {f.shape[0] for f in self.features.values()}
        if len(clip_counts) != 1:
            raise InvalidArgument(f"all videos must share a clip count, got {clip_counts}")
        self.num_clips = clip_counts.pop()
        dims = {f.shape[1] for f in self.features.values()}
        if len(dims) != 1:
            raise InvalidArgument(f"all videos must share a feature dim, got {dims}")
        self.d_v = dims.pop()
        sdims = {a.embedding_dim for a in self.articles.values()}
        if len(sdims) != 1:
            raise InvalidArgument(f"all articles must share an embedding dim, got {sdims}")
        self.d_s = sdims.pop()
        self.task_ids = sorted(self.articles)
        for vid, task in self.video_tasks.items():
            if task not in self.articles:
                raise InvalidArgument(f"video {vid!r} references unknown task {task!r}")
        self.videos_by_task: dict[str, list[str]] = {t: [] for t in self.task_ids}
        for vid in sorted(self.features):
            self.videos_by_task[self.video_tasks[vid]].append(vid)
        self.pairs = [TrainPair(video_id=vid, article_id=self.video_tasks[vid],
                                task_id=self.video_tasks[vid])
                      for vid in sorted(self.features)]
        self._indices: dict[float, MapIndex] = {}

    @classmethod
    def from_manifest(cls, path: str) -> "TrainingData":
        man = read_manifest(path)
        features = {}
        video_tasks = {}
        durations = {}
        for v in man.videos:
            features[v.video_id] = read_features(
                man.video_path(v), expect_clips=v.num_clips).astype(np.float64)
            video_tasks[v.video_id] = v.task_id
            durations[v.video_id] = v.duration
        from .formats import read_article
        articles = {a.task_id: read_article(man.article_path(a))
                    for a in man.articles}
        return cls(features, articles, video_tasks, durations)

    @classmethod
    def from_tasks(cls, tasks) -> "TrainingData":
        """Build directly from synthetic tasks (full float64 features)."""
        features, articles, video_tasks, durations = {}, {}, {}, {}
        for task in tasks:
            articles[task.task_id] = task.article
            for vid, f in task.clip_features.items():
                features[vid] = f
                video_tasks[vid] = task.task_id
                durations[vid] = task.duration
        return cls(features, articles, video_tasks, durations)

    def index_for(self, video_id: str) -> MapIndex:
        dur = self.durations[video_id]
        if dur not in self._indices:
            self._indices[dur] = build_map_index(self.num_clips, dur)
        return self._indices[dur]


def sample_negatives(pair: TrainPair, data: TrainingData,
                     rng: np.random.Generator) -> tuple[str, str]:
    """Uniform negative video and negative article from other tasks.

    Returns (neg_video_id, neg_article_task_id). Raises UnsatisfiableNegative
    when the pool holds no other task.
    """
    others = [t for t in data.task_ids if t != pair.task_id]
    if not others:
        raise UnsatisfiableNegative(
            f"cannot sample negatives: every video belongs to task {pair.task_id!r}")
    neg_videos = [vid for t in others for vid in data.videos_by_task[t]]
    neg_video = neg_videos[int(rng.integers(len(neg_videos)))]
    neg_article = others[int(rng.integers(len(others)))]
    return neg_video, neg_article


def adam_step(params: ModelParams, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update over the flat parameter vector."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.theta.shape:
        raise InvalidArgument(
            f"gradient shape {g.shape} does not match parameters {params.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericFault("adam_step", "non-finite gradient passed to adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParams(params.layout, theta), AdamState(t=t, m=m, v=v)


def subsample_article(article: Article, max_sentences: int,
                      rng: np.random.Generator) -> tuple[Article, tuple[int, ...]]:
    """Random size-capped view of an article, closed under parent links.

    Returns (view, kept original indices). The uniform subset is extended by
    any missing parents of retained children, so the view can exceed
    max_sentences by at most the number of such parents.
    """
    if max_sentences < 1:
        raise InvalidArgument(f"max_sentences must be >= 1, got {max_sentences}")
    n = len(article)
    if n <= max_sentences:
        return article, tuple(range(n))
    kept = set(int(i) for i in rng.choice(n, size=max_sentences, replace=False))
    for i in list(kept):
        parent = article.sentences[i].parent
        if parent is not None:
            kept.add(parent)
    order = sorted(kept)
    remap = {orig: new for new, orig in enumerate(order)}
    sentences = []
    for new, orig in enumerate(order):
        s = article.sentences[orig]
        parent = None if s.parent is None else remap[s.parent]
        sentences.append(Sentence(index=new, scale=s.scale, parent=parent,
                                  embedding=s.embedding))
    return Article(article_id=article.article_id,
                   sentences=tuple(sentences)), tuple(order)


@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: str
    log_path: str
    epochs_run: int


def _resolve_dims(data: TrainingData, cfg: RunConfig) -> tuple[int, int]:
    d_v = data.d_v if cfg.d_v == 0 else cfg.d_v
    d_s = data.d_s if cfg.d_s == 0 else cfg.d_s
    if d_v != data.d_v:
        raise InvalidArgument(f"config d_v={cfg.d_v} but features have dim {data.d_v}")
    if d_s != data.d_s:
        raise InvalidArgument(f"config d_s={cfg.d_s} but articles have dim {data.d_s}")
    return d_v, d_s


def train(data: TrainingData, cfg: RunConfig, out_dir: str,
          resume: bool = False, stop_after_epoch: int | None = None) -> TrainResult:
    """Run (or resume) the training loop; see the module docstring for the
    determinism contract.

    Writes out_dir/checkpoint.ckpt after every epoch and appends one log
    record per optimization step to out_dir/train.log.
    """
    if len(data.task_ids) < 2:
        raise InvalidArgument("training needs at least 2 tasks for negatives")
    os.makedirs(out_dir, exist_ok=True)
    if cfg.backend != "auto":
        kernels.set_backend(cfg.backend)
    dtype = np.float64 if cfg.precision == "double" else np.float32
    hp = cfg.hyper()
    d_v, d_s = _resolve_dims(data, cfg)
    if cfg.num_clips != data.num_clips:
        raise InvalidArgument(
            f"config num_clips={cfg.num_clips} but data has {data.num_clips}")

    ckpt_path = os.path.join(out_dir, "checkpoint.ckpt")
    log_path = os.path.join(out_dir, "train.log")
    start_epoch = 0
    if resume:
        ck = load_checkpoint(ckpt_path)
        params = ck.params
        if (params.layout.d_v, params.layout.d_s, params.layout.d_h) != (d_v, d_s, cfg.d_h):
            raise InvalidArgument("checkpoint dims do not match the configuration")
        if ck.adam is None or ck.next_epoch is None:
            raise InvalidArgument("checkpoint lacks optimizer state; cannot resume")
        adam = AdamState(t=ck.adam[0], m=ck.adam[1], v=ck.adam[2])
        start_epoch = ck.next_epoch
    else:
        params = init_params(d_v, d_s, cfg.d_h, seed=cfg.seed)
        adam = AdamState.zeros(params.layout.size)
        if os.path.exists(log_path):
            os.remove(log_path)

    wall_start = time.perf_counter()
    epochs_run = 0
    log_fh = open(log_path, "a", encoding="utf-8")
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(data.pairs))
            phase = "warmup" if epoch < hp.warmup_epochs else "full"
            for step in range(0, len(order), hp.batch_size):
                batch = order[step:step + hp.batch_size]
                batch_grad = np.zeros(params.layout.size)
                mil_sum = cs_sum = total_sum = 0.0
                for pi in batch:
                    pair = data.pairs[int(pi)]
                    art_view, _ = subsample_article(
                        data.articles[pair.task_id], cfg.max_sentences, rng)
                    neg_video, neg_task = sample_negatives(pair, data, rng)
                    neg_art_view, _ = subsample_article(
                        data.articles[neg_task], cfg.max_sentences, rng)
                    index = data.index_for(pair.video_id)
                    pos_maps, pos_cache = forward(
                        params, data.features[pair.video_id],
                        art_view.embeddings(), index, dtype=dtype)
                    negv_maps, negv_cache = forward(
                        params, data.features[neg_video],
                        art_view.embeddings(), data.index_for(neg_video),
                        dtype=dtype)
                    nega_maps, nega_cache = forward(
                        params, data.features[pair.video_id],
                        neg_art_view.embeddings(), index, dtype=dtype)
                    total, breakdown, grads = total_loss(
                        pos_maps, art_view, (negv_maps, nega_maps), hp, phase)
                    g = backward(pos_cache, grads["pos"])
                    g += backward(negv_cache, grads["neg_video"])
                    g += backward(nega_cache, grads["neg_article"])
                    batch_grad += g
                    mil_sum += breakdown["mil"]
                    cs_sum += breakdown["cs"]
                    total_sum += total
                scale = 1.0 / len(batch)
                batch_grad *= scale
                params, adam = adam_step(params, batch_grad, adam, hp.lr)
                append_log_record(log_fh, epoch, step // hp.batch_size, phase,
                                  mil_sum * scale, cs_sum * scale,
                                  total_sum * scale,
                                  time.perf_counter() - wall_start)
            log_fh.flush()
            save_checkpoint(ckpt_path, params, data.num_clips,
                            adam=(adam.t, adam.m, adam.v), next_epoch=epoch + 1)
            epochs_run += 1
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    finally:
        log_fh.close()
    if not os.path.exists(ckpt_path):
        # epochs=0 run: still leave a loadable artifact
        save_checkpoint(ckpt_path, params, data.num_clips,
                        adam=(adam.t, adam.m, adam.v), next_epoch=0)
    return TrainResult(params=params, checkpoint_path=ckpt_path,
                       log_path=log_path, epochs_run=epochs_run)
