"""On-disk formats: features, checkpoints, manifests, articles, GT,
predictions, lock files, and the training log.

Binary layouts are little-endian and fully specified here; text formats are
tab-separated with floats written via repr() so they round-trip exactly
(prediction scores are the one deliberate exception: fixed 6 decimals).
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .article import Article, Sentence
from .errors import FormatError, InvalidArgument
from .geometry import Segment
from .inference import Prediction
from .model import ModelParams, ParamLayout

FEATURE_MAGIC = b"WSAGF1"
CKPT_MAGIC = b"WSAGCKPT"
CKPT_VERSION = 1
ADAM_TAG = b"ADAM"
TRAIN_TAG = b"TRNS"


# ---------------------------------------------------------------------------
# clip features

def write_features(path: str, features: np.ndarray) -> None:
    """Write an (N, d) feature matrix: magic, two uint32 LE, float32 LE rows."""
    arr = np.ascontiguousarray(features, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgument(f"features must be a nonempty 2D matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_features(path: str, expect_clips: int | None = None,
                  expect_dim: int | None = None) -> np.ndarray:
    """Read a feature file back as a float32 (N, d) matrix.

    Any layout violation raises FormatError carrying the byte offset of the
    first inconsistency.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic in {path!r}", offset=0)
    if len(blob) < 14:
        raise FormatError(f"feature header truncated in {path!r}", offset=len(blob))
    n, d = struct.unpack("<II", blob[6:14])
    if n < 1:
        raise FormatError(f"num_clips must be >= 1, got {n}", offset=6)
    if d < 1:
        raise FormatError(f"feature dim must be >= 1, got {d}", offset=10)
    expected = 14 + 4 * n * d
    if len(blob) < expected:
        raise FormatError(
            f"feature payload truncated in {path!r}: expected {expected} bytes, "
            f"got {len(blob)}", offset=len(blob))
    if len(blob) > expected:
        raise FormatError(f"trailing bytes after feature payload in {path!r}",
                          offset=expected)
    if expect_clips is not None and n != expect_clips:
        raise FormatError(
            f"feature file {path!r} has {n} clips, manifest says {expect_clips}",
            offset=6)
    if expect_dim is not None and d != expect_dim:
        raise FormatError(
            f"feature file {path!r} has dim {d}, expected {expect_dim}", offset=10)
    arr = np.frombuffer(blob, dtype="<f4", offset=14).reshape(n, d)
    return arr.astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    """Everything a checkpoint file can carry.

    adam is (t, m, v) with m, v flat float64 arrays matching the parameter
    vector; next_epoch is the first epoch a resumed run should execute.
    Both are None when the file carries bare parameters.
    """

    params: ModelParams
    num_clips: int
    adam: tuple[int, np.ndarray, np.ndarray] | None = None
    next_epoch: int | None = None


def save_checkpoint(path: str, params: ModelParams, num_clips: int,
                    adam: tuple[int, np.ndarray, np.ndarray] | None = None,
                    next_epoch: int | None = None) -> None:
    layout = params.layout
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<IIII", layout.d_v, layout.d_s, layout.d_h, num_clips))
        fh.write(params.theta.astype("<f8", copy=False).tobytes())
        if adam is not None:
            t, m, v = adam
            m = np.asarray(m, dtype=np.float64)
            v = np.asarray(v, dtype=np.float64)
            if m.shape != (layout.size,) or v.shape != (layout.size,):
                raise InvalidArgument("adam moment shapes do not match the parameters")
            fh.write(ADAM_TAG)
            fh.write(struct.pack("<Q", int(t)))
            fh.write(m.astype("<f8", copy=False).tobytes())
            fh.write(v.astype("<f8", copy=False).tobytes())
        if next_epoch is not None:
            fh.write(TRAIN_TAG)
            fh.write(struct.pack("<I", int(next_epoch)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path!r}", offset=0)
    if len(blob) < 9 or blob[8] != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version in {path!r}", offset=8)
    if len(blob) < 25:
        raise FormatError(f"checkpoint header truncated in {path!r}", offset=len(blob))
    d_v, d_s, d_h, num_clips = struct.unpack("<IIII", blob[9:25])
    if min(d_v, d_s, d_h, num_clips) < 1:
        raise FormatError(f"nonsensical checkpoint dims in {path!r}", offset=9)
    layout = ParamLayout(d_v, d_s, d_h)
    pos = 25
    need = 8 * layout.size
    if len(blob) < pos + need:
        raise FormatError(
            f"checkpoint parameters truncated in {path!r}: expected {need} bytes",
            offset=len(blob))
    theta = np.frombuffer(blob, dtype="<f8", offset=pos, count=layout.size).copy()
    pos += need
    params = ModelParams(layout, theta)
    adam = None
    next_epoch = None
    while pos < len(blob):
        tag = blob[pos:pos + 4]
        if tag == ADAM_TAG:
            if adam is not None:
                raise FormatError(f"duplicate optimizer section in {path!r}", offset=pos)
            pos += 4
            if len(blob) < pos + 8 + 16 * layout.size:
                raise FormatError(f"optimizer section truncated in {path!r}",
                                  offset=len(blob))
            (t,) = struct.unpack("<Q", blob[pos:pos + 8])
            pos += 8
            m = np.frombuffer(blob, dtype="<f8", offset=pos, count=layout.size).copy()
            pos += 8 * layout.size
            v = np.frombuffer(blob, dtype="<f8", offset=pos, count=layout.size).copy()
            pos += 8 * layout.size
            adam = (int(t), m, v)
        elif tag == TRAIN_TAG:
            if next_epoch is not None:
                raise FormatError(f"duplicate training section in {path!r}", offset=pos)
            pos += 4
            if len(blob) < pos + 4:
                raise FormatError(f"training section truncated in {path!r}",
                                  offset=len(blob))
            (next_epoch,) = struct.unpack("<I", blob[pos:pos + 4])
            pos += 4
        else:
            raise FormatError(f"unknown checkpoint section {tag!r} in {path!r}",
                              offset=pos)
    return Checkpoint(params=params, num_clips=int(num_clips), adam=adam,
                      next_epoch=next_epoch)


# ---------------------------------------------------------------------------
# predictions

def write_predictions(path: str, predictions) -> None:
    """video_id<TAB>sentence_idx<TAB>start<TAB>end<TAB>score, 6-decimal scores,
    one line per prediction in ranked order."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(f"{p.video_id}\t{p.sentence_idx}\t{p.segment.start!r}"
                     f"\t{p.segment.end!r}\t{p.score:.6f}\n")


def read_predictions(path: str) -> list[Prediction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(
                    f"{path!r} line {lineno}: expected 5 tab-separated fields, "
                    f"got {len(parts)}")
            try:
                out.append(Prediction(parts[0], int(parts[1]),
                                      Segment(float(parts[2]), float(parts[3])),
                                      float(parts[4])))
            except (ValueError, InvalidArgument) as exc:
                raise FormatError(f"{path!r} line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# ground truth

def write_gt(path: str, records) -> None:
    """records: iterable of (video_id, sentence_idx, Segment)."""
    with open(path, "w", encoding="utf-8") as fh:
        for video_id, sidx, seg in records:
            fh.write(f"{video_id}\t{sidx}\t{seg.start!r}\t{seg.end!r}\n")


def read_gt(path: str) -> list[tuple[str, int, Segment]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(
                    f"{path!r} line {lineno}: expected 4 tab-separated fields, "
                    f"got {len(parts)}")
            try:
                out.append((parts[0], int(parts[1]),
                            Segment(float(parts[2]), float(parts[3]))))
            except (ValueError, InvalidArgument) as exc:
                raise FormatError(f"{path!r} line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# articles

def write_article(path: str, article: Article) -> None:
    """First line names the article; then one line per sentence in order:
    index, scale, parent index or 'none', comma-joined embedding values."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"article\t{article.article_id}\n")
        for s in article.sentences:
            parent = "none" if s.parent is None else str(s.parent)
            vec = ",".join(repr(float(x)) for x in s.embedding)
            fh.write(f"{s.index}\t{s.scale}\t{parent}\t{vec}\n")


def read_article(path: str) -> Article:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("article\t"):
        raise FormatError(f"{path!r}: missing 'article' header line")
    article_id = lines[0].split("\t", 1)[1]
    sentences = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(
                f"{path!r} line {lineno}: expected 4 tab-separated fields, "
                f"got {len(parts)}")
        try:
            idx = int(parts[0])
            parent = None if parts[2] == "none" else int(parts[2])
            emb = np.array([float(x) for x in parts[3].split(",")], dtype=np.float64)
            sentences.append(Sentence(index=idx, scale=parts[1], parent=parent,
                                      embedding=emb))
        except (ValueError, InvalidArgument) as exc:
            raise FormatError(f"{path!r} line {lineno}: {exc}") from exc
    try:
        return Article(article_id=article_id, sentences=tuple(sentences))
    except InvalidArgument as exc:
        raise FormatError(f"{path!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class VideoEntry:
    task_id: str
    video_id: str
    feature_path: str  # relative to the manifest's directory
    num_clips: int
    duration: float


@dataclass(frozen=True)
class ArticleEntry:
    task_id: str
    article_path: str  # relative to the manifest's directory


@dataclass
class Manifest:
    root: str
    videos: list[VideoEntry]
    articles: list[ArticleEntry]

    def video_path(self, entry: VideoEntry) -> str:
        return os.path.join(self.root, entry.feature_path)

    def article_path(self, entry: ArticleEntry) -> str:
        return os.path.join(self.root, entry.article_path)


def write_manifest(path: str, videos, articles) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in videos:
            fh.write(f"video\t{v.task_id}\t{v.video_id}\t{v.feature_path}"
                     f"\t{v.num_clips}\t{v.duration!r}\n")
        for a in articles:
            fh.write(f"article\t{a.task_id}\t{a.article_path}\n")


def read_manifest(path: str) -> Manifest:
    """Parse and validate a manifest: referenced files must exist and ids must
    be unique."""
    root = os.path.dirname(os.path.abspath(path))
    videos: list[VideoEntry] = []
    articles: list[ArticleEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "video":
                if len(parts) != 6:
                    raise FormatError(f"{path!r} line {lineno}: video rows take "
                                      f"6 fields, got {len(parts)}")
                try:
                    n = int(parts[4])
                    dur = float(parts[5])
                except ValueError as exc:
                    raise FormatError(f"{path!r} line {lineno}: {exc}") from exc
                if n < 1 or not (math.isfinite(dur) and dur > 0):
                    raise FormatError(f"{path!r} line {lineno}: bad clip count "
                                      f"or duration")
                videos.append(VideoEntry(parts[1], parts[2], parts[3], n, dur))
            elif parts[0] == "article":
                if len(parts) != 3:
                    raise FormatError(f"{path!r} line {lineno}: article rows take "
                                      f"3 fields, got {len(parts)}")
                articles.append(ArticleEntry(parts[1], parts[2]))
            else:
                raise FormatError(f"{path!r} line {lineno}: unknown row kind "
                                  f"{parts[0]!r}")
    seen_videos = set()
    for v in videos:
        if v.video_id in seen_videos:
            raise FormatError(f"{path!r}: duplicate video id {v.video_id!r}")
        seen_videos.add(v.video_id)
        if not os.path.exists(os.path.join(root, v.feature_path)):
            raise FormatError(f"{path!r}: feature file {v.feature_path!r} missing")
    seen_tasks = set()
    for a in articles:
        if a.task_id in seen_tasks:
            raise FormatError(f"{path!r}: duplicate article for task {a.task_id!r}")
        seen_tasks.add(a.task_id)
        if not os.path.exists(os.path.join(root, a.article_path)):
            raise FormatError(f"{path!r}: article file {a.article_path!r} missing")
    for v in videos:
        if v.task_id not in seen_tasks:
            raise FormatError(f"{path!r}: video {v.video_id!r} references task "
                              f"{v.task_id!r} with no article")
    return Manifest(root=root, videos=videos, articles=articles)


# ---------------------------------------------------------------------------
# lock files and the training log

def write_lock(path: str, entries: dict) -> None:
    """Sorted key=value lines; the canonical echo of a resolved configuration."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def read_lock(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path!r} line {lineno}: expected key=value")
            key, value = line.split("=", 1)
            if key in out:
                raise FormatError(f"{path!r} line {lineno}: duplicate key {key!r}")
            out[key] = value
    return out


def append_log_record(fh, epoch: int, step: int, phase: str, mil: float,
                      cs: float, total: float, wall: float) -> None:
    fh.write(f"{epoch}\t{step}\t{phase}\t{mil!r}\t{cs!r}\t{total!r}\t{wall:.3f}\n")


def read_train_log(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise FormatError(f"{path!r} line {lineno}: expected 7 fields, "
                                  f"got {len(parts)}")
            try:
                out.append({
                    "epoch": int(parts[0]), "step": int(parts[1]),
                    "phase": parts[2], "mil": float(parts[3]),
                    "cs": float(parts[4]), "total": float(parts[5]),
                    "wall": float(parts[6]),
                })
            except ValueError as exc:
                raise FormatError(f"{path!r} line {lineno}: {exc}") from exc
    return out
