"""Deterministic synthetic benchmark generator.

All tasks of a spec share one step-concept vocabulary (a pool of random unit
vectors with pairwise |cos| below CONCEPT_COS_BOUND); each task samples its
high-level steps from that pool, the way procedure datasets reuse recurring
steps across tasks. Each task plants its sequence of step concepts in its
videos: the clip range is
partitioned into contiguous step intervals, each step interval is partitioned
among that step's child sub-steps, and every clip carries the concept of the
sub-step covering it plus Gaussian noise whose expected vector norm is
noise_sigma. The article describes the
steps with one high-level sentence per step and its low-level children, minus
a replaced fraction that becomes distractors.

Construction detail that tests rely on: child concepts are
parent + u_i with u_i orthogonal to the parent and the length-weighted sum
of u_i forced to zero per parent. Pooling clip features over a parent's
exact interval then reproduces the parent concept exactly at sigma = 0, so
every planted cell maximizes cosine similarity against its sentence concept.
Block lengths are drawn once per task; each video lays the step blocks out
in its own order, so planted intervals move across a task's videos while
the lengths that make the weighting exact stay fixed.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .article import Article, Sentence
from .errors import GenerationFailure, InvalidArgument
from .evaluation import GroundTruth
from .formats import (ArticleEntry, VideoEntry, write_article, write_features,
                      write_gt, write_lock, write_manifest)
from .geometry import Segment

DURATION = 64.0
MAX_ATTEMPTS = 10_000
CONCEPT_COS_BOUND = 0.3
CHILD_PERTURBATION = 0.5
POOL_FACTOR = 4


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs of the synthetic benchmark; defaults give a desk-scale dataset."""

    num_tasks: int = 20
    videos_per_task: int = 5
    num_clips: int = 16
    clip_dim: int = 32
    sent_dim: int = 32
    high_per_article: int = 6
    low_per_high: int = 2
    distractor_count: int = 4
    noise_sigma: float = 0.1
    groundable_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for name in ("num_tasks", "videos_per_task", "num_clips", "clip_dim",
                     "sent_dim", "high_per_article", "low_per_high"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.distractor_count < 0:
            raise InvalidArgument(
                f"distractor_count must be >= 0, got {self.distractor_count}")
        if not (0.0 < self.groundable_fraction <= 1.0):
            raise InvalidArgument("groundable_fraction must lie in (0, 1], got "
                                  f"{self.groundable_fraction}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise InvalidArgument(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.clip_dim != self.sent_dim:
            raise InvalidArgument(
                "clip_dim and sent_dim must match: concepts live in one space, "
                f"got {self.clip_dim} and {self.sent_dim}")
        if self.num_clips < self.high_per_article * self.low_per_high:
            raise InvalidArgument(
                f"num_clips={self.num_clips} cannot hold {self.high_per_article} "
                f"steps of {self.low_per_high} one-clip children each")


@dataclass
class SyntheticTask:
    task_id: str
    step_concepts: np.ndarray            # (high, d)
    article: Article
    clip_features: dict[str, np.ndarray]  # video_id -> (N, d) float64
    gt: GroundTruth
    duration: float = DURATION


class _Attempts:
    """Shared rejection-sampling budget for one task."""

    def __init__(self, cap: int):
        self.left = cap

    def spend(self):
        self.left -= 1
        if self.left < 0:
            raise GenerationFailure(
                "rejection sampling exceeded 10000 attempts; the spec is too "
                "crowded for its dimensionality")


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    while True:
        v = rng.standard_normal(d)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def _composition(rng: np.random.Generator, total: int, parts: int,
                 minimum: int) -> list[int]:
    """Uniform composition of total into parts summing parts, each >= minimum."""
    extra = total - parts * minimum
    if extra < 0:
        raise InvalidArgument(f"cannot split {total} into {parts} parts of "
                              f">= {minimum}")
    if parts == 1:
        return [total]
    if extra == 0:
        return [minimum] * parts
    bars = np.sort(rng.choice(extra + parts - 1, size=parts - 1, replace=False))
    sizes = []
    prev = -1
    for b in bars:
        sizes.append(int(b) - prev - 1)
        prev = int(b)
    sizes.append(extra + parts - 1 - prev - 1)
    return [minimum + s for s in sizes]


def _step_concepts(rng, high: int, d: int, budget: _Attempts) -> np.ndarray:
    rows = []
    while len(rows) < high:
        budget.spend()
        v = _unit(rng, d)
        if all(abs(float(v @ c)) < CONCEPT_COS_BOUND for c in rows):
            rows.append(v)
    return np.array(rows)


def _concept_pool(spec: GeneratorSpec) -> np.ndarray:
    """Step vocabulary shared by every task of one spec.

    Tasks sample their high-level steps from this pool, so held-out tasks
    recombine step concepts that also occur in training tasks instead of
    introducing unseen directions. Deterministic per spec seed and drawn
    from a stream separate from the per-task ones.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    budget = _Attempts(MAX_ATTEMPTS)
    return _step_concepts(rng, POOL_FACTOR * spec.high_per_article,
                          spec.clip_dim, budget)


def _orthogonal_concept(rng, basis_q: np.ndarray, d: int,
                        budget: _Attempts) -> np.ndarray:
    # basis_q: (d, k) orthonormal columns spanning the step concepts
    while True:
        budget.spend()
        v = _unit(rng, d)
        v = v - basis_q @ (basis_q.T @ v)
        n = float(np.linalg.norm(v))
        if n > 1e-8:
            return v / n


def _perp_unit(rng, p: np.ndarray, budget: _Attempts) -> np.ndarray:
    while True:
        budget.spend()
        v = _unit(rng, p.shape[0])
        v = v - float(v @ p) * p
        n = float(np.linalg.norm(v))
        if n > 1e-8:
            return v / n


def generate_task(spec: GeneratorSpec, task_index: int) -> SyntheticTask:
    """Build one task: concepts, shared timing, article, features, and GT."""
    if task_index < 0:
        raise InvalidArgument(f"task_index must be >= 0, got {task_index}")
    rng = np.random.default_rng(spec.seed * 1_000_003 + task_index)
    budget = _Attempts(MAX_ATTEMPTS)
    d = spec.clip_dim
    high, m = spec.high_per_article, spec.low_per_high
    task_id = f"task{task_index:04d}"

    pool = _concept_pool(spec)
    steps = pool[rng.choice(len(pool), size=high, replace=False)]
    basis_q, _ = np.linalg.qr(steps.T)  # (d, high), orthonormal columns

    step_lens = _composition(rng, spec.num_clips, high, m)
    child_lens = [_composition(rng, L, m, 1) for L in step_lens]

    # child concepts: parent + perturbation, length-weighted perturbations
    # summing to zero within each parent so pooling a parent's exact window
    # reproduces the parent concept at sigma = 0
    child_concepts: list[list[np.ndarray]] = []
    for h in range(high):
        p = steps[h]
        perturbs = [CHILD_PERTURBATION * _perp_unit(rng, p, budget)
                    for _ in range(m - 1)]
        weighted = sum((child_lens[h][i] * perturbs[i] for i in range(m - 1)),
                       np.zeros(d))
        perturbs.append(-weighted / child_lens[h][m - 1])
        child_concepts.append([p + u for u in perturbs])

    clip_len = DURATION / spec.num_clips

    # article plan: steps in order, each high followed by its children;
    # (h, c) names the covering sub-step, timing is laid out per video below
    plan: list[dict] = []
    for h in range(high):
        hi = {"scale": "high", "parent": None, "concept": steps[h],
              "h": h, "c": None, "grounded": True}
        plan.append(hi)
        for c in range(m):
            lo = {"scale": "low", "parent": hi,
                  "concept": child_concepts[h][c],
                  "h": h, "c": c, "grounded": True}
            plan.append(lo)

    n_step_sent = len(plan)
    n_replace = int((1.0 - spec.groundable_fraction) * n_step_sent)
    if n_replace > 0:
        positions = np.sort(rng.choice(n_step_sent, size=n_replace, replace=False))
        for pos in positions:
            item = plan[int(pos)]
            item["concept"] = _orthogonal_concept(rng, basis_q, d, budget)
            item["grounded"] = False
            item["replaced"] = True
    # sever links touching replaced sentences
    for item in plan:
        if item.get("replaced"):
            item["parent"] = None
        elif item["parent"] is not None and item["parent"].get("replaced"):
            item["parent"] = None

    for _ in range(spec.distractor_count):
        pos = int(rng.integers(0, len(plan) + 1))
        plan.insert(pos, {"scale": "high", "parent": None,
                          "concept": _orthogonal_concept(rng, basis_q, d, budget),
                          "h": None, "c": None, "grounded": False})

    # noise_sigma is the expected noise-vector norm, so the per-coordinate
    # deviation shrinks with dimension and corruption stays comparable
    # across feature widths
    sent_sd = spec.noise_sigma / math.sqrt(spec.sent_dim)
    clip_sd = spec.noise_sigma / math.sqrt(d)

    index_of = {id(item): i for i, item in enumerate(plan)}
    sentences = []
    for i, item in enumerate(plan):
        emb = item["concept"] + sent_sd * rng.standard_normal(spec.sent_dim)
        parent = None if item["parent"] is None else index_of[id(item["parent"])]
        sentences.append(Sentence(index=i, scale=item["scale"], parent=parent,
                                  embedding=emb))
    article = Article(article_id=task_id, sentences=tuple(sentences))

    # per-video layout: every video arranges the step blocks in its own
    # order, so a sentence's planted interval moves from video to video and
    # the only cross-video constancy is the concept carried by the clips.
    # Block lengths stay attached to their concepts, keeping parent-window
    # pooling exact.
    gt = GroundTruth()
    video_ids = [f"{task_id}_v{v:02d}" for v in range(spec.videos_per_task)]
    clip_features = {}
    for vid in video_ids:
        order = rng.permutation(high)
        start, step_start = 0, {}
        for h in order:
            step_start[int(h)] = start
            start += step_lens[int(h)]
        child_off = []
        for h in range(high):
            offs = [step_start[h]]
            for c in range(m - 1):
                offs.append(offs[-1] + child_lens[h][c])
            child_off.append(offs)

        # every clip carries the concept of the covering sub-step
        clip_concepts = np.zeros((spec.num_clips, d))
        for h in range(high):
            for c in range(m):
                a = child_off[h][c]
                clip_concepts[a:a + child_lens[h][c]] = child_concepts[h][c]

        for i, item in enumerate(plan):
            if not item["grounded"]:
                continue
            h, c = item["h"], item["c"]
            if c is None:
                a = step_start[h]
                b = a + step_lens[h]
            else:
                a = child_off[h][c]
                b = a + child_lens[h][c]
            gt.add(vid, i, Segment(a * clip_len, b * clip_len))

        noise = clip_sd * rng.standard_normal((spec.num_clips, d))
        clip_features[vid] = clip_concepts + noise

    return SyntheticTask(task_id=task_id, step_concepts=steps, article=article,
                         clip_features=clip_features, gt=gt)


def oracle_score_maps(clips: np.ndarray, embeddings: np.ndarray,
                      index) -> list[np.ndarray]:
    """Score maps straight from the generator's geometry, bypassing the model.

    Each valid cell scores sigmoid(4 * cosine(pooled clip features, sentence
    embedding)); invalid cells are 0. At sigma = 0 the planted cell of every
    groundable sentence attains the per-sentence maximum by construction.
    """
    from scipy.special import expit

    from .geometry import pool_proposal_features, validity_mask

    pooled = pool_proposal_features(np.asarray(clips, dtype=np.float64), index)
    mask = validity_mask(index.num_clips)
    norms = np.linalg.norm(pooled, axis=-1)
    norms[~mask] = 1.0
    emb = np.asarray(embeddings, dtype=np.float64)
    maps = []
    for e in emb:
        en = float(np.linalg.norm(e))
        if en == 0.0:
            raise InvalidArgument("sentence embedding has zero norm")
        cos = (pooled @ e) / (norms * en)
        maps.append(np.where(mask, expit(4.0 * cos), 0.0))
    return maps


def generate_dataset(spec: GeneratorSpec) -> tuple[list[SyntheticTask], list[SyntheticTask]]:
    """All tasks, split 80/20 by task index into (train, test)."""
    if spec.num_tasks < 2:
        raise InvalidArgument(f"need >= 2 tasks to split, got {spec.num_tasks}")
    tasks = [generate_task(spec, i) for i in range(spec.num_tasks)]
    n_train = int(0.8 * spec.num_tasks)
    return tasks[:n_train], tasks[n_train:]


def _write_split(tasks: list[SyntheticTask], split_dir: str,
                 spec: GeneratorSpec) -> None:
    os.makedirs(os.path.join(split_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(split_dir, "articles"), exist_ok=True)
    videos, articles = [], []
    for task in tasks:
        art_rel = os.path.join("articles", f"{task.task_id}.article")
        write_article(os.path.join(split_dir, art_rel), task.article)
        articles.append(ArticleEntry(task_id=task.task_id, article_path=art_rel))
        for vid in sorted(task.clip_features):
            feat_rel = os.path.join("features", f"{vid}.feat")
            write_features(os.path.join(split_dir, feat_rel),
                           task.clip_features[vid].astype(np.float32))
            videos.append(VideoEntry(task_id=task.task_id, video_id=vid,
                                     feature_path=feat_rel,
                                     num_clips=spec.num_clips,
                                     duration=task.duration))
    write_manifest(os.path.join(split_dir, "manifest.tsv"), videos, articles)


def _gt_records(tasks: list[SyntheticTask]):
    for task in tasks:
        for (vid, sidx) in sorted(task.gt.segments):
            for seg in task.gt.segments[(vid, sidx)]:
                yield vid, sidx, seg


def write_dataset(train: list[SyntheticTask], test: list[SyntheticTask],
                  out_dir: str, spec: GeneratorSpec) -> None:
    """Write both splits plus spec.lock.

    The train split's GT goes to a separate oracle file that no training
    manifest references; the test split keeps its GT alongside its manifest.
    """
    os.makedirs(out_dir, exist_ok=True)
    _write_split(train, os.path.join(out_dir, "train"), spec)
    _write_split(test, os.path.join(out_dir, "test"), spec)
    os.makedirs(os.path.join(out_dir, "oracle"), exist_ok=True)
    write_gt(os.path.join(out_dir, "oracle", "train_gt.tsv"), _gt_records(train))
    write_gt(os.path.join(out_dir, "test", "gt.tsv"), _gt_records(test))
    write_lock(os.path.join(out_dir, "spec.lock"),
               dataclasses.asdict(spec))
