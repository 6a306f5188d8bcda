"""Axis-aligned boxes, ray/box slab intersection and per-tile ray segmentation.

All coordinates are metric, in the scene-local frame (UTM minus a fixed
origin offset).  Functions come in a scalar flavour operating on a single
:class:`Ray` and a batched flavour operating on ``(n, 3)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

# Intersections shorter than this (grazing rays) are treated as misses.
GRAZING_EPS = 1e-6


@dataclass(frozen=True)
class Aabb3:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64)
        hi = np.asarray(self.max_corner, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if not np.all(lo < hi):
            raise ValueError(f"degenerate box: {lo} !< {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def corners(self) -> np.ndarray:
        """The 8 corners, shape (8, 3)."""
        lo, hi = self.min_corner, self.max_corner
        idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return np.where(idx == 0, lo, hi)

    def contains(self, points: np.ndarray, strict: bool = False) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        if strict:
            return np.all((p > self.min_corner) & (p < self.max_corner), axis=-1)
        return np.all((p >= self.min_corner) & (p <= self.max_corner), axis=-1)

    def interiors_overlap(self, other: "Aabb3") -> bool:
        return bool(np.all(np.maximum(self.min_corner, other.min_corner)
                           < np.minimum(self.max_corner, other.max_corner)))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    image_id: Hashable = None
    pixel: tuple = (0, 0)
    target_color: Optional[np.ndarray] = None

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit norm, got |d|={n}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class RaySegment:
    tile_id: tuple
    t_near: float
    t_far: float

    @property
    def length(self) -> float:
        return self.t_far - self.t_near


def intersect_rays_aabb(origins, directions, box_min, box_max):
    """Batched slab test.

    ``origins``/``directions`` are ``(n, 3)``; ``box_min``/``box_max`` are
    ``(3,)`` or ``(k, 3)``.  Returns ``(t_near, t_far, hit)`` broadcast to
    ``(n,)`` or ``(n, k)``.  ``t_near`` is clipped at 0; misses, hits behind
    the origin and grazing hits have ``hit == False``.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    if lo.ndim == 2:
        o = o[:, None, :]
        d = d[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # A ray parallel to a slab is inside it for all t, or never.
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = (t_far - t_near) >= GRAZING_EPS
    return t_near, t_far, hit


def intersect_ray_aabb(ray: Ray, box: Aabb3):
    """Entry/exit distances of ``ray`` through ``box`` or ``None``."""
    tn, tf, hit = intersect_rays_aabb(ray.origin[None], ray.direction[None],
                                      box.min_corner, box.max_corner)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


def check_non_overlapping(boxes: Sequence[Aabb3]) -> None:
    los = np.array([b.min_corner for b in boxes])
    his = np.array([b.max_corner for b in boxes])
    if len(boxes) < 2:
        return
    lo = np.maximum(los[:, None, :], los[None, :, :])
    hi = np.minimum(his[:, None, :], his[None, :, :])
    overlap = np.all(lo < hi, axis=-1)
    np.fill_diagonal(overlap, False)
    if overlap.any():
        i, j = np.argwhere(overlap)[0]
        raise ValueError(f"tile boxes {i} and {j} overlap")


def segment_ray(ray: Ray, tiles: Iterable[tuple]) -> list:
    """Split ``ray`` into ordered per-tile segments.

    ``tiles`` is an iterable of ``(tile_id, Aabb3)`` with disjoint interiors.
    """
    tiles = list(tiles)
    if not tiles:
        return []
    check_non_overlapping([b for _, b in tiles])
    los = np.array([b.min_corner for _, b in tiles])
    his = np.array([b.max_corner for _, b in tiles])
    tn, tf, hit = intersect_rays_aabb(ray.origin[None], ray.direction[None], los, his)
    tn, tf, hit = tn[0], tf[0], hit[0]
    segs = [RaySegment(tiles[k][0], float(tn[k]), float(tf[k])) for k in np.flatnonzero(hit)]
    segs.sort(key=lambda s: s.t_near)
    return segs


def count_tile_hits(ray: Ray, grid_boxes: Sequence[Aabb3]) -> int:
    los = np.array([b.min_corner for b in grid_boxes])
    his = np.array([b.max_corner for b in grid_boxes])
    _, _, hit = intersect_rays_aabb(ray.origin[None], ray.direction[None], los, his)
    return int(hit.sum())


@dataclass
class SegmentTable:
    """Batched segmentation result: up to ``k`` segments per ray, sorted by t.

    ``tile_index`` holds indices into the box list that was segmented against,
    ``-1`` for padding.
    """
    tile_index: np.ndarray  # (n, k) int
    t_near: np.ndarray      # (n, k)
    t_far: np.ndarray       # (n, k)
    count: np.ndarray = field(default=None)  # (n,)

    def __post_init__(self):
        if self.count is None:
            self.count = (self.tile_index >= 0).sum(axis=1)


def segment_rays(origins, directions, box_mins, box_maxs, max_segments: int = 4) -> SegmentTable:
    """Batched :func:`segment_ray` against ``k`` boxes (no overlap check)."""
    box_mins = np.atleast_2d(box_mins)
    box_maxs = np.atleast_2d(box_maxs)
    tn, tf, hit = intersect_rays_aabb(origins, directions, box_mins, box_maxs)
    key = np.where(hit, tn, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :max_segments]
    rows = np.arange(len(key))[:, None]
    hit_s = hit[rows, order]
    tile_index = np.where(hit_s, order, -1)
    return SegmentTable(tile_index, np.where(hit_s, tn[rows, order], 0.0),
                        np.where(hit_s, tf[rows, order], 0.0))


def count_hits_batch(origins, directions, box_mins, box_maxs) -> np.ndarray:
    _, _, hit = intersect_rays_aabb(origins, directions, np.atleast_2d(box_mins),
                                    np.atleast_2d(box_maxs))
    return hit.sum(axis=1)
