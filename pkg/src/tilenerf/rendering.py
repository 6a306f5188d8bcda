"""Segmented sampling along tile segments and volume rendering.

Samples of a batch are stored flat and grouped by ray: ``ray_index`` is
non-decreasing and the samples of one ray are ordered by ``t``.  Every
segment contributes both of its endpoints, so the point where a ray leaves
one tile and enters the next appears twice.  Spacings are forward
differences over the whole ray, so the first copy of that point has zero
spacing and no rendering weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import SegmentTable


@dataclass
class SamplingPolicy:
    samples_per_meter: float = 2.0
    max_samples_per_ray: int = 1024
    min_per_segment: int = 2
    fixed_per_segment: Optional[int] = None
    final_delta_cap: float = 10.0
    stratified: bool = True


@dataclass
class RaySegmentBatch:
    ray_index: np.ndarray   # (m,) int
    t: np.ndarray           # (m,) metres along the ray
    delta: np.ndarray       # (m,) metres
    tile_slot: np.ndarray   # (m,) index into the tile list that was sampled
    is_endpoint: np.ndarray  # (m,) bool
    n_rays: int

    def __len__(self):
        return len(self.t)

    def subset(self, keep: np.ndarray) -> "RaySegmentBatch":
        return RaySegmentBatch(self.ray_index[keep], self.t[keep], self.delta[keep],
                               self.tile_slot[keep], self.is_endpoint[keep], self.n_rays)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.ray_index, self.t, self.delta, self.tile_slot,
                                      self.is_endpoint))


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


def sample_segments(segments: SegmentTable, policy: SamplingPolicy, t_exit: np.ndarray,
                    rng: Optional[np.random.Generator] = None) -> RaySegmentBatch:
    """Inclusive stratified samples on every segment of every ray.

    ``t_exit`` is the per-ray distance to the bottom of the volume, used for
    the spacing of each ray's last sample.  ``rng=None`` disables jitter.
    """
    valid = segments.tile_index >= 0
    ray_of, slot_of = np.nonzero(valid)          # row-major: rays, then segments by t
    t0 = segments.t_near[ray_of, slot_of]
    t1 = segments.t_far[ray_of, slot_of]
    length = t1 - t0
    if policy.fixed_per_segment is not None:
        count = np.full(len(t0), int(policy.fixed_per_segment), dtype=np.int64)
    else:
        count = np.ceil(length * policy.samples_per_meter).astype(np.int64) + 1
    count = np.maximum(count, policy.min_per_segment)
    # per-ray cap: shrink segment counts proportionally
    per_ray = np.bincount(ray_of, weights=count, minlength=segments.tile_index.shape[0])
    scale = np.minimum(1.0, policy.max_samples_per_ray / np.maximum(per_ray, 1))
    count = np.maximum(np.floor(count * scale[ray_of]).astype(np.int64), policy.min_per_segment)

    seg = np.repeat(np.arange(len(t0)), count)
    start = np.cumsum(count) - count
    k = np.arange(len(seg)) - start[seg]
    n = count[seg]
    u = k / (n - 1)
    if rng is not None and policy.stratified:
        interior = (k > 0) & (k < n - 1)
        jitter = (rng.random(len(seg)) - 0.5) / (n - 1)
        u = np.where(interior, u + jitter, u)
    t = t0[seg] + u * length[seg]
    last = k == n - 1
    t = np.where(last, t1[seg], t)
    t = np.where(k == 0, t0[seg], t)

    ray_index = ray_of[seg]
    delta = np.empty_like(t)
    delta[:-1] = t[1:] - t[:-1]
    ray_end = np.ones(len(t), dtype=bool)
    ray_end[:-1] = ray_index[1:] != ray_index[:-1]
    final = np.clip(np.asarray(t_exit)[ray_index] - t, 0.0, policy.final_delta_cap)
    delta = np.where(ray_end, final, delta)
    tile_slot = segments.tile_index[ray_of, slot_of][seg]
    return RaySegmentBatch(ray_index, t, delta, tile_slot, (k == 0) | last,
                           segments.tile_index.shape[0])


def cull(batch: RaySegmentBatch, occupied: np.ndarray) -> RaySegmentBatch:
    """Drop interior samples in empty voxels; endpoints always survive.

    Spacings were computed before culling, so a dropped sample simply
    removes its interval from the quadrature.
    """
    return batch.subset(occupied | batch.is_endpoint)


def _ray_starts(ray_index: np.ndarray, n_rays: int) -> np.ndarray:
    return np.searchsorted(ray_index, np.arange(n_rays + 1))


def _segment_exclusive_cumsum(values: np.ndarray, ray_index: np.ndarray, n_rays: int):
    """Exclusive per-ray prefix sums (float64) and per-ray totals."""
    v = values.astype(np.float64)
    cs = np.cumsum(v)
    starts = _ray_starts(ray_index, n_rays)
    base = np.concatenate([[0.0], cs])[starts[:-1]]
    excl = cs - v - base[ray_index]
    total = np.concatenate([[0.0], cs])[starts[1:]] - base
    return excl, total


def _ray_sum(values: np.ndarray, ray_index: np.ndarray, n_rays: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(ray_index, weights=values, minlength=n_rays)
    return np.stack([np.bincount(ray_index, weights=values[:, c], minlength=n_rays)
                     for c in range(values.shape[1])], axis=1)


@dataclass
class RenderCache:
    weights: np.ndarray
    trans_after: np.ndarray
    rgb: np.ndarray
    delta: np.ndarray
    ray_index: np.ndarray
    n_rays: int


def render(sigma, color, batch: RaySegmentBatch, background=(0.5, 0.5, 0.5),
           check_finite: bool = True):
    """Standard quadrature: ``alpha = 1 - exp(-sigma*delta)``, one product per ray.

    Returns ``(RenderOutput, cache)``.  The cache feeds :func:`render_backward`.
    """
    sigma = np.asarray(sigma)
    color = np.asarray(color)
    if check_finite and not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(color))):
        bad = np.unique(batch.ray_index[~(np.isfinite(sigma) & np.isfinite(color).all(axis=1))])
        raise FloatingPointError(f"non-finite density/colour on rays {bad[:8].tolist()}")
    dtype = np.result_type(sigma.dtype, np.float32)
    n = batch.n_rays
    tau = sigma.astype(np.float64) * batch.delta
    excl, total = _segment_exclusive_cumsum(tau, batch.ray_index, n)
    trans = np.exp(-excl)
    alpha = -np.expm1(-tau)
    w = trans * alpha
    bg = np.asarray(background, dtype=np.float64)
    t_final = np.exp(-total)
    rgb = _ray_sum(w[:, None] * color, batch.ray_index, n) + t_final[:, None] * bg
    acc = _ray_sum(w, batch.ray_index, n)
    depth = _ray_sum(w * batch.t, batch.ray_index, n) / np.maximum(acc, 1e-10)
    out = RenderOutput(rgb.astype(dtype), depth.astype(dtype), acc.astype(dtype))
    cache = RenderCache(w, trans * np.exp(-tau), rgb, batch.delta, batch.ray_index, n)
    return out, cache


def render_backward(cache: RenderCache, color, grad_rgb):
    """Gradients of a loss w.r.t. per-sample density and colour."""
    color = np.asarray(color)
    g = np.asarray(grad_rgb, dtype=np.float64)[cache.ray_index]     # (m, 3)
    wc = cache.weights[:, None] * color
    incl = np.cumsum(wc, axis=0)
    starts = _ray_starts(cache.ray_index, cache.n_rays)
    base = np.concatenate([np.zeros((1, 3)), incl])[starts[:-1]]
    prefix = incl - base[cache.ray_index]
    suffix = cache.rgb[cache.ray_index] - prefix                  # later samples + background
    d_sigma = cache.delta * np.sum(g * (cache.trans_after[:, None] * color - suffix), axis=1)
    d_color = cache.weights[:, None] * g
    dtype = color.dtype
    return d_sigma.astype(dtype), d_color.astype(dtype)


def color_loss(rgb, target):
    """Mean squared error over rays and channels and its gradient."""
    rgb = np.asarray(rgb, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = rgb - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad
