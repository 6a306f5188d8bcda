"""Synthetic overhead scenes: box buildings on flat ground, exact ray tracing.

The generator renders each view with an analytic pinhole camera looking at
the scene from a long distance (satellite-like, nearly parallel rays),
then fits an RPC model to that camera.  Training code only ever sees the
fitted RPC, as it would with real imagery.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import camera as cam
from .tiler import Roi

log = logging.getLogger(__name__)

MAX_FIT_RMS_PX = 0.05


@dataclass
class Building:
    x0: float
    x1: float
    y0: float
    y1: float
    height: float
    roof_color: tuple
    wall_color: tuple


@dataclass
class ViewSpec:
    azimuth_deg: float
    off_nadir_deg: float
    held_out: bool = False


@dataclass
class SceneSpec:
    roi: Roi
    buildings: list
    views: list
    gsd: float = 0.5
    camera_distance: float = 5000.0
    sun_direction: tuple = (0.35, 0.25, 0.9)
    ambient: float = 0.35
    ground_height: float = 0.0
    utm_origin: tuple = (500000.0, 4000000.0)
    texture_seed: int = 0
    image_margin_px: int = 4
    cast_shadows: bool = False

    def __post_init__(self):
        for b in self.buildings:
            if not (self.roi.z_min <= self.ground_height < b.height <= self.roi.z_max):
                raise ValueError(f"building height {b.height} outside [z_min, z_max]")
        if self.cast_shadows:
            raise NotImplementedError("cast shadows are not modelled")

    @property
    def max_off_nadir_deg(self) -> float:
        return max(v.off_nadir_deg for v in self.views)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roi"] = self.roi.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["roi"] = Roi(**d["roi"])
        d["buildings"] = [Building(**{**b, "roof_color": tuple(b["roof_color"]),
                                      "wall_color": tuple(b["wall_color"])})
                          for b in d["buildings"]]
        d["views"] = [ViewSpec(**v) for v in d["views"]]
        for k in ("sun_direction", "utm_origin"):
            d[k] = tuple(d[k])
        return cls(**d)


def default_views(n_train: int = 10, max_off_nadir: float = 30.0, seed: int = 0) -> list:
    """``n_train`` oblique views spread in azimuth plus one held-out nadir view."""
    rng = np.random.default_rng(seed)
    az = np.linspace(0.0, 360.0, n_train, endpoint=False) + rng.uniform(0, 360.0 / n_train)
    off = rng.uniform(0.45 * max_off_nadir, max_off_nadir, n_train)
    views = [ViewSpec(float(a % 360.0), float(o)) for a, o in zip(az, off)]
    views.append(ViewSpec(0.0, 0.0, held_out=True))
    return views


def random_scene(extent_e: float = 64.0, extent_n: float = 64.0, z_min: float = -1.0,
                 z_max: float = 7.0, buildings_per_km2: float = 5000.0, n_train_views: int = 10,
                 max_off_nadir: float = 30.0, gsd: float = 0.5, seed: int = 0,
                 size_range=(4.0, 10.0), height_range=(1.5, 6.0), **kwargs) -> SceneSpec:
    """Random non-overlapping box buildings at a fixed density per area."""
    rng = np.random.default_rng(seed)
    roi = Roi(0.0, extent_e, 0.0, extent_n, z_min, z_max)
    target = int(round(buildings_per_km2 * extent_e * extent_n / 1e6))
    placed = []
    attempts = 0
    while len(placed) < target and attempts < 200 * max(target, 1):
        attempts += 1
        w, h = rng.uniform(*size_range, size=2)
        x0 = rng.uniform(1.0, extent_e - 1.0 - w)
        y0 = rng.uniform(1.0, extent_n - 1.0 - h)
        cand = (x0 - 1.0, x0 + w + 1.0, y0 - 1.0, y0 + h + 1.0)
        if any(cand[0] < b.x1 and b.x0 < cand[1] and cand[2] < b.y1 and b.y0 < cand[3]
               for b in placed):
            continue
        roof = tuple(float(v) for v in rng.uniform(0.15, 0.9, 3))
        wall = tuple(float(v) for v in rng.uniform(0.2, 0.8, 3))
        placed.append(Building(float(x0), float(x0 + w), float(y0), float(y0 + h),
                               float(rng.uniform(*height_range)), roof, wall))
    views = default_views(n_train_views, max_off_nadir, seed)
    return SceneSpec(roi, placed, views, gsd=gsd, texture_seed=seed, **kwargs)


# -- analytic camera ----------------------------------------------------------

@dataclass
class PinholeView:
    """Pinhole camera at ``center`` looking along ``forward``."""
    center: np.ndarray
    forward: np.ndarray
    col_axis: np.ndarray
    row_axis: np.ndarray
    focal_px: float
    principal: np.ndarray  # (row0, col0)
    image_size: tuple

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64) - self.center
        z = p @ self.forward
        row = self.focal_px * (p @ self.row_axis) / z + self.principal[0]
        col = self.focal_px * (p @ self.col_axis) / z + self.principal[1]
        return np.stack([row, col], axis=-1)

    def rays(self, pixels):
        """Unit directions through continuous pixel coordinates ``(n, 2)``."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d = (self.forward[None, :]
             + ((px[:, 1] - self.principal[1]) / self.focal_px)[:, None] * self.col_axis
             + ((px[:, 0] - self.principal[0]) / self.focal_px)[:, None] * self.row_axis)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d


def view_direction(view: ViewSpec) -> np.ndarray:
    """Unit vector from the scene toward the camera."""
    az, th = np.radians(view.azimuth_deg), np.radians(view.off_nadir_deg)
    return np.array([np.sin(th) * np.cos(az), np.sin(th) * np.sin(az), np.cos(th)])


def make_pinhole(spec: SceneSpec, view: ViewSpec) -> PinholeView:
    roi = spec.roi
    target = np.array([(roi.easting_min + roi.easting_max) / 2,
                       (roi.northing_min + roi.northing_max) / 2, spec.ground_height])
    v = view_direction(view)
    center = target + spec.camera_distance * v
    f = -v
    east = np.array([1.0, 0.0, 0.0])
    col_axis = east - (east @ f) * f
    col_axis /= np.linalg.norm(col_axis)
    row_axis = np.cross(f, col_axis)
    focal = spec.camera_distance / spec.gsd
    probe = PinholeView(center, f, col_axis, row_axis, focal, np.zeros(2), (0, 0))
    proj = probe.project(roi.box.corners())
    m = spec.image_margin_px
    lo = np.floor(proj.min(axis=0)) - m
    hi = np.ceil(proj.max(axis=0)) + m
    size = tuple(int(s) for s in (hi - lo))
    return PinholeView(center, f, col_axis, row_axis, focal, -lo, size)


def fit_camera(spec: SceneSpec, pin: PinholeView, grid=(20, 20, 10)) -> tuple:
    """Fit an RPC to ``pin``; returns ``(camera, rms_px)`` on held-out points."""
    roi = spec.roi
    # cover the whole imaged ground, not just the ROI, so border pixels localize
    pad = (roi.z_max - roi.z_min) * np.tan(np.radians(max(spec.max_off_nadir_deg, 1.0))) \
        + 2 * spec.image_margin_px * spec.gsd
    lo = np.array([roi.easting_min - pad, roi.northing_min - pad, roi.z_min])
    hi = np.array([roi.easting_max + pad, roi.northing_max + pad, roi.z_max])
    axes = [np.linspace(lo[k], hi[k], grid[k]) for k in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    rpc = cam.fit_rpc(g, pin.project(g), pin.image_size,
                      ground_offset=(lo + hi) / 2, ground_scale=(hi - lo) / 2)
    rng = np.random.default_rng(12345)
    test = rng.uniform(lo, hi, size=(10_000, 3))
    err = rpc.project(test, check=False) - pin.project(test)
    rms = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
    return rpc, rms


# -- scene shading ---------------------------------------------------------------

def _wave_texture(x, y, seed, n_waves=6, fmin=1 / 8.0, fmax=1 / 1.5):
    rng = np.random.default_rng(seed)
    out = np.zeros(np.broadcast(x, y).shape + (3,))
    for _ in range(n_waves):
        f = rng.uniform(fmin, fmax)
        ang = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.09, 3)
        out += amp * np.sin(2 * np.pi * f * (np.cos(ang) * x + np.sin(ang) * y) + ph)[..., None]
    return out


def albedo(spec: SceneSpec, points, kind, building_idx) -> np.ndarray:
    """Procedural Lambertian albedo; ``kind`` is 0 ground, 1 roof, 2 wall."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    seed = spec.texture_seed
    out = np.empty((len(p), 3))
    g = kind == 0
    base = np.array([0.45, 0.42, 0.36])
    out[g] = base + 1.6 * _wave_texture(x[g], y[g], seed)
    if spec.buildings:
        roof = np.array([b.roof_color for b in spec.buildings])
        wall = np.array([b.wall_color for b in spec.buildings])
        r = kind == 1
        out[r] = roof[building_idx[r]] * (0.85 + 1.5 * _wave_texture(x[r], y[r], seed + 1))
        w = kind == 2
        stripes = 0.12 * np.sign(np.sin(2 * np.pi * z[w] / 1.5))[:, None]
        along = _wave_texture(x[w] + y[w], z[w], seed + 2)
        out[w] = wall[building_idx[w]] * (0.9 + stripes + 1.2 * along)
    return np.clip(out, 0.02, 0.98)


def trace(spec: SceneSpec, origins, directions):
    """First hit of rays against ground plane and buildings.

    Returns ``(t, normal, kind, building_idx)``; rays pointing upward miss the
    ground and get ``t = inf``.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    n = len(o)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d[:, 2] < 0, (spec.ground_height - o[:, 2]) / d[:, 2], np.inf)
    normal = np.tile([0.0, 0.0, 1.0], (n, 1))
    kind = np.zeros(n, dtype=np.int64)
    bidx = np.full(n, -1, dtype=np.int64)
    if spec.buildings:
        lo = np.array([[b.x0, b.y0, spec.ground_height] for b in spec.buildings])
        hi = np.array([[b.x1, b.y1, b.height] for b in spec.buildings])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d[:, None, :]
            t0 = (lo[None] - o[:, None]) * inv
            t1 = (hi[None] - o[:, None]) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        entry = tmin.max(axis=2)
        exit_ = tmax.min(axis=2)
        hit = (entry <= exit_) & (entry > 0)
        entry = np.where(hit, entry, np.inf)
        best = entry.argmin(axis=1)
        tb = entry[np.arange(n), best]
        closer = tb < t
        t = np.where(closer, tb, t)
        axis = tmin[np.arange(n), best].argmax(axis=1)
        nb = np.zeros((n, 3))
        nb[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])
        normal[closer] = nb[closer]
        kind[closer] = np.where(axis[closer] == 2, 1, 2)
        bidx[closer] = best[closer]
    return t, normal, kind, bidx


def shade(spec: SceneSpec, origins, directions):
    """Exact colour and hit distance along each ray."""
    t, normal, kind, bidx = trace(spec, origins, directions)
    pts = origins + t[:, None] * directions
    sun = np.asarray(spec.sun_direction, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    lam = spec.ambient + (1.0 - spec.ambient) * np.clip(normal @ sun, 0.0, None)
    rgb = albedo(spec, pts, kind, bidx) * lam[:, None]
    return np.clip(rgb, 0.0, 1.0), t


def pixel_centers(shape) -> np.ndarray:
    rows, cols = shape
    r, c = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


def oracle_render(spec: SceneSpec, pin: PinholeView):
    """Exact image and depth for one view.

    Depth is the distance along the ray from where it crosses ``z_max``,
    matching the origin convention of RPC-derived rays.
    """
    px = pixel_centers(pin.image_size)
    o, d = pin.rays(px)
    rgb, t = shade(spec, o, d)
    t_top = (spec.roi.z_max - o[:, 2]) / d[:, 2]
    depth = t - t_top
    rows, cols = pin.image_size
    return rgb.reshape(rows, cols, 3), depth.reshape(rows, cols)


# -- dataset on disk ---------------------------------------------------------------

DEPTH_NOTE = "float32 numpy .npy raster, metres along the ray from its z_max crossing"


def generate(spec: SceneSpec, out_dir, seed: int = 0, workers: int = 1) -> dict:
    """Write images, fitted cameras, depth rasters and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "cameras").mkdir(exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)

    def one(k_view):
        k, view = k_view
        pin = make_pinhole(spec, view)
        rpc, rms = fit_camera(spec, pin)
        if rms >= MAX_FIT_RMS_PX:
            raise RuntimeError(f"view {k}: RPC fit residual {rms:.4f} px >= {MAX_FIT_RMS_PX}")
        rgb, depth = oracle_render(spec, pin)
        Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(out / "images" / f"view_{k}.png")
        rpc.save(out / "cameras" / f"view_{k}.rpc")
        np.save(out / "gt" / f"depth_{k}.npy", depth.astype(np.float32))
        return dict(id=k, image=f"images/view_{k}.png", camera=f"cameras/view_{k}.rpc",
                    depth=f"gt/depth_{k}.npy", azimuth_deg=view.azimuth_deg,
                    off_nadir_deg=view.off_nadir_deg, held_out=view.held_out,
                    image_size=list(pin.image_size), fit_rms_px=rms)

    items = list(enumerate(spec.views))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            views = list(ex.map(one, items))
    else:
        views = [one(it) for it in items]
    manifest = dict(
        format="tilenerf-dataset", version=1, seed=seed,
        roi=spec.roi.to_dict(), z_min=spec.roi.z_min, z_max=spec.roi.z_max,
        utm_origin=list(spec.utm_origin), gsd=spec.gsd,
        max_off_nadir_deg=spec.max_off_nadir_deg, depth_format=DEPTH_NOTE,
        views=views, scene=spec.to_dict(),
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d views to %s", len(views), out)
    return manifest
