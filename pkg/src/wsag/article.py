"""Articles: ordered multi-scale sentence lists with parent links."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

SCALES = ("high", "low")


@dataclass(frozen=True)
class Sentence:
    """One article sentence: position, scale, optional parent, embedding.

    A parent link is only meaningful for low-scale sentences; distractors of
    either scale carry no link. index is the article position.
    """

    index: int
    scale: str
    parent: int | None
    embedding: np.ndarray

    def __post_init__(self):
        if self.scale not in SCALES:
            raise InvalidArgument(f"sentence scale must be one of {SCALES}, got {self.scale!r}")
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or not np.all(np.isfinite(emb)):
            raise InvalidArgument("sentence embedding must be a finite 1D vector")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class Hierarchy:
    """Ordered low-level child indices per high-level sentence index."""

    children: dict[int, tuple[int, ...]]

    def __post_init__(self):
        seen = set()
        for h, kids in self.children.items():
            for k in kids:
                if k in seen:
                    raise InvalidArgument(f"sentence {k} appears as a child twice")
                seen.add(k)
            if h in seen:
                raise InvalidArgument(f"sentence {h} is both parent and child")
        if seen & set(self.children):
            raise InvalidArgument("high-level and child index sets overlap")

    def validate_indices(self, n: int):
        for h, kids in self.children.items():
            for idx in (h, *kids):
                if not 0 <= idx < n:
                    raise InvalidArgument(
                        f"hierarchy references sentence {idx}, article has {n}")

    def pairs(self):
        """(parent, child) pairs in article order."""
        for h in sorted(self.children):
            for k in self.children[h]:
                yield h, k


@dataclass
class Article:
    """Sentences in article order. Hierarchy is derived from parent links."""

    article_id: str
    sentences: list[Sentence] = field(default_factory=list)

    def __post_init__(self):
        if not self.sentences:
            raise InvalidArgument("article must contain at least one sentence")
        for pos, s in enumerate(self.sentences):
            if s.index != pos:
                raise InvalidArgument(
                    f"sentence index {s.index} at position {pos}; must be consecutive from 0")
        d = self.sentences[0].embedding.shape[0]
        for s in self.sentences:
            if s.embedding.shape[0] != d:
                raise InvalidArgument("all sentence embeddings must share one dimension")
            if s.parent is not None:
                if not 0 <= s.parent < len(self.sentences):
                    raise InvalidArgument(f"sentence {s.index} has parent {s.parent}, out of range")
                if self.sentences[s.parent].scale != "high":
                    raise InvalidArgument(
                        f"sentence {s.index} links to parent {s.parent} which is not high-scale")
                if s.scale != "low":
                    raise InvalidArgument(f"high-scale sentence {s.index} cannot have a parent")

    def __len__(self):
        return len(self.sentences)

    @property
    def embedding_dim(self) -> int:
        return self.sentences[0].embedding.shape[0]

    def embeddings(self) -> np.ndarray:
        return np.stack([s.embedding for s in self.sentences])

    def hierarchy(self) -> Hierarchy:
        kids: dict[int, list[int]] = {}
        for s in self.sentences:
            if s.parent is not None:
                kids.setdefault(s.parent, []).append(s.index)
        return Hierarchy({h: tuple(v) for h, v in kids.items()})
