"""Geometry of the 2D temporal proposal map.

A video of duration ``D`` seconds is split into ``N`` equal clips. Cell
``(i, j)`` of an ``N x N`` map, with ``i <= j``, denotes the candidate segment
spanning clips ``i`` through ``j`` inclusive, i.e. the interval
``[i * L, (j + 1) * L)`` with ``L = D / N``. Only the upper triangle is valid;
everything below the diagonal is dead space kept at zero by the layers that
operate on maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class Segment:
    """A temporal interval in seconds.

    Attributes:
        start: inclusive start time, >= 0.
        end: exclusive end time, > start.
    """

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise InvalidArgument(f"segment bounds must be finite, got {self}")
        if self.start < 0:
            raise InvalidArgument(f"segment start must be >= 0, got {self.start}")
        if not self.start < self.end:
            raise InvalidArgument(
                f"segment start must precede end, got [{self.start}, {self.end}]"
            )

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class MapIndex:
    """Static geometry of one proposal map.

    Attributes:
        num_clips: N, the number of clips the video is split into.
        duration: video duration in seconds.
        valid_cells: all (i, j) with i <= j, row-major (i ascending, then j).
    """

    num_clips: int
    duration: float
    valid_cells: tuple[tuple[int, int], ...]

    @property
    def clip_length(self) -> float:
        return self.duration / self.num_clips


def build_map_index(num_clips: int, duration: float) -> MapIndex:
    """Enumerate the valid cells of an N x N proposal map.

    Args:
        num_clips: N >= 1.
        duration: video duration in seconds, > 0.

    Returns:
        MapIndex with N(N+1)/2 cells in row-major order.
    """
    if not isinstance(num_clips, (int, np.integer)) or num_clips < 1:
        raise InvalidArgument(f"num_clips must be a positive integer, got {num_clips!r}")
    if not (math.isfinite(duration) and duration > 0):
        raise InvalidArgument(f"duration must be positive and finite, got {duration!r}")
    cells = tuple(
        (i, j) for i in range(num_clips) for j in range(i, num_clips)
    )
    return MapIndex(num_clips=int(num_clips), duration=float(duration), valid_cells=cells)


def validity_mask(num_clips: int) -> np.ndarray:
    """Boolean N x N mask, True on the upper triangle (valid cells)."""
    if num_clips < 1:
        raise InvalidArgument(f"num_clips must be >= 1, got {num_clips}")
    return np.triu(np.ones((num_clips, num_clips), dtype=bool))


def cell_to_segment(cell: tuple[int, int], index: MapIndex) -> Segment:
    """Convert a map cell to its temporal segment.

    Cell (i, j) covers clips i..j inclusive, so the segment is
    [i * L, (j + 1) * L) with L = duration / N.
    """
    i, j = cell
    n = index.num_clips
    if not (0 <= i <= j < n):
        raise InvalidArgument(f"cell {cell} out of range for N={n}")
    clip_len = index.duration / n
    return Segment(start=i * clip_len, end=(j + 1) * clip_len)


def segment_iou(a: Segment, b: Segment) -> float:
    """Intersection-over-union of two segments, in [0, 1].

    Segments are treated as real intervals of positive length; a zero-length
    intersection counts as 0.
    """
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def resample_clips(raw_features: np.ndarray, target: int) -> np.ndarray:
    """Reduce T raw feature rows to N clip rows by equal-width bin means.

    Row t falls in the bin floor(t * N / T) of the N equal-width bins tiling
    [0, T). Each output row is the mean of its bin's rows; a bin with no rows
    (only possible when N > T) copies the nearest earlier raw row.

    Args:
        raw_features: (T, d) array, T >= 1.
        target: N >= 1.

    Returns:
        (N, d) float64 array.
    """
    raw = np.asarray(raw_features, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise InvalidArgument(f"raw features must be a nonempty 2D array, got shape {raw.shape}")
    if not isinstance(target, (int, np.integer)) or target < 1:
        raise InvalidArgument(f"target clip count must be a positive integer, got {target!r}")
    t_rows = raw.shape[0]
    n = int(target)
    if t_rows == n:
        return raw.copy()
    bins = (np.arange(t_rows) * n) // t_rows
    out = np.empty((n, raw.shape[1]), dtype=np.float64)
    for b in range(n):
        lo, hi = np.searchsorted(bins, [b, b + 1])
        if hi > lo:
            out[b] = raw[lo:hi].mean(axis=0)
        else:
            # nearest raw row strictly before this bin's left edge b*T/N
            nearest = (b * t_rows + n - 1) // n - 1
            out[b] = raw[nearest]
    return out


def pool_proposal_features(clips: np.ndarray, index: MapIndex) -> np.ndarray:
    """Mean-pool clip features over every valid cell of the map.

    Output[i, j] = mean of clip rows i..j inclusive for valid cells; invalid
    cells hold zeros. Sums accumulate in clip order along each diagonal band,
    so the result is deterministic and cell (i, i) reproduces clip i exactly.

    Args:
        clips: (N, d) array matching index.num_clips.
        index: map geometry.

    Returns:
        (N, N, d) float64 array.
    """
    feats = np.asarray(clips, dtype=np.float64)
    n = index.num_clips
    if feats.ndim != 2 or feats.shape[0] != n:
        raise InvalidArgument(
            f"clip features must have {n} rows to match the map, got shape {feats.shape}"
        )
    if not np.all(np.isfinite(feats)):
        raise InvalidArgument("clip features must be finite")
    d = feats.shape[1]
    out = np.zeros((n, n, d), dtype=np.float64)
    band = feats.copy()  # band[i] = sum of clips i..i+w-1, starting at w=1
    rows = np.arange(n)
    out[rows, rows] = feats
    for width in range(2, n + 1):
        band = band[:-1] + feats[width - 1:]
        rows = np.arange(n - width + 1)
        out[rows, rows + width - 1] = band / width
    return out
