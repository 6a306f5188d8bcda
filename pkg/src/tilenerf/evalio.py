"""Image and depth metrics, tile-edge band masks and evaluation reports.

Every run is scored twice: against the synthetic ground truth (``abs``)
and against the reference-mode rendering of the same view (``rel``).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from . import dataio
from .tiler import TileGrid

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` over all values, capped for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(mse)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM of the channel-mean grey images (11x11 Gaussian, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=2), b.mean(axis=2)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def depth_mae(d1, d2, valid_mask=None) -> float:
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape:
        raise ValueError(f"shape mismatch {d1.shape} vs {d2.shape}")
    mask = np.ones(d1.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not mask.any():
        raise ValueError("empty validity mask")
    return float(np.mean(np.abs(d1[mask] - d2[mask])))


# -- pixel masks over an evaluation view ------------------------------------------------

def view_ground_points(view: dataio.View, height: float) -> np.ndarray:
    """Easting/northing at ``height`` seen by every pixel centre, ``(rows, cols, 2)``."""
    rows, cols = view.shape
    r, c = np.nonzero(np.ones((rows, cols), dtype=bool))
    xy = view.camera.localize(dataio.pixel_to_continuous(r, c), height)
    return xy.reshape(rows, cols, 2)


def roi_mask(view: dataio.View, roi, z_min: float, z_max: float) -> np.ndarray:
    """Pixels whose ray stays over the ROI between ``z_max`` and ``z_min``."""
    rows, cols = view.shape
    r, c = np.nonzero(np.ones((rows, cols), dtype=bool))
    o, d = dataio.rays_for_pixels(view, r, c, z_min, z_max)
    return dataio.in_roi(o, d, roi).reshape(rows, cols)


def roi_rect(mask: np.ndarray) -> tuple:
    """Bounding rectangle ``(r0, r1, c0, c1)`` of a pixel mask."""
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        raise ValueError("no pixels inside the ROI")
    return int(rr.min()), int(rr.max()) + 1, int(cc.min()), int(cc.max()) + 1


def view_quadrant_labels(view: dataio.View, grid: TileGrid, z_min: float, z_max: float):
    """Tile index (grid order) under each pixel at mid-height; -1 outside."""
    xy = view_ground_points(view, 0.5 * (z_min + z_max))
    r, c = grid.locate(xy[..., 0], xy[..., 1])
    lab = r * grid.cols + c
    lab[r < 0] = -1
    return lab


def edge_distance_px(view: dataio.View, grid: TileGrid, height: float) -> tuple:
    """Pixel distance of each pixel to the nearest interior tile edge and to
    the ROI outline, both projected at ``height``.

    Distances are measured in the image: each pixel's ground point is moved
    onto the edge line along the perpendicular axis and re-projected.
    """
    xy = view_ground_points(view, height)
    rows, cols = view.shape
    px = dataio.pixel_to_continuous(*np.nonzero(np.ones((rows, cols), dtype=bool)))
    e, n = xy[..., 0].ravel(), xy[..., 1].ravel()

    def dist(axis, value):
        pts = np.column_stack([e, n, np.full(e.shape, height)])
        pts[:, axis] = value
        proj = view.camera.project(pts, check=False)
        return np.hypot(*(proj - px).T)

    inner = np.full(e.shape, np.inf)
    for x in grid.easting_edges[1:-1]:
        inner = np.minimum(inner, dist(0, x))
    for y in grid.northing_edges[1:-1]:
        inner = np.minimum(inner, dist(1, y))
    outer = np.full(e.shape, np.inf)
    for x in (grid.easting_edges[0], grid.easting_edges[-1]):
        outer = np.minimum(outer, dist(0, x))
    for y in (grid.northing_edges[0], grid.northing_edges[-1]):
        outer = np.minimum(outer, dist(1, y))
    return inner.reshape(rows, cols), outer.reshape(rows, cols)


def band_masks(view: dataio.View, grid: TileGrid, z_min: float, z_max: float,
               band_px: float = 8.0, inside=None) -> tuple:
    """``(band, interior)``: pixels within ``band_px`` of an interior tile
    edge, and pixels farther than ``band_px`` from every edge including the
    ROI outline.  Both restricted to ``inside`` (default: in-ROI pixels)."""
    inside = roi_mask(view, grid.roi, z_min, z_max) if inside is None else inside
    inner, outer = edge_distance_px(view, grid, 0.5 * (z_min + z_max))
    band = inside & (inner <= band_px) & (outer > band_px)
    interior = inside & (inner > band_px) & (outer > band_px)
    return band, interior


# -- reports --------------------------------------------------------------------------

REPORT_COLUMNS = ("method", "view", "psnr_abs", "psnr_rel", "ssim_abs", "ssim_rel", "mae_abs",
                  "mae_rel", "band_mae", "interior_mae", "band_ratio", "coverage", "runtime_s",
                  "peak_bytes")


@dataclass
class EvalRow:
    method: str
    view: int
    psnr_abs: float
    ssim_abs: float
    mae_abs: float
    band_mae: float
    interior_mae: float
    coverage: float
    psnr_rel: Optional[float] = None
    ssim_rel: Optional[float] = None
    mae_rel: Optional[float] = None
    runtime_s: Optional[float] = None
    peak_bytes: Optional[int] = None

    @property
    def band_ratio(self) -> float:
        return self.band_mae / max(self.interior_mae, 1e-12)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        self.rows.append(row)

    def by_method(self, method: str) -> EvalRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            vals = []
            for col in REPORT_COLUMNS:
                v = getattr(r, col)
                vals.append("" if v is None else (f"{v:.6g}" if isinstance(v, float) else v))
            w.writerow(vals)
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(json.dumps(
            [dict(asdict(r), band_ratio=r.band_ratio) for r in self.rows], indent=2))


def score_view(method: str, view: dataio.View, rendered, grid: TileGrid, z_min: float,
               z_max: float, reference=None, band_px: float = 8.0, opacity_min: float = 0.5,
               runtime_s=None, peak_bytes=None, masks=None) -> EvalRow:
    """Score one rendered view (a ``RenderOutput`` shaped like the image).

    Images are compared over the bounding rectangle of in-ROI pixels; depth
    over in-ROI pixels whose rendered opacity reaches ``opacity_min``.
    """
    if masks is None:
        inside = roi_mask(view, grid.roi, z_min, z_max)
        masks = (inside,) + band_masks(view, grid, z_min, z_max, band_px, inside)
    inside, band, interior = masks
    r0, r1, c0, c1 = roi_rect(inside)
    gt = view.load_image().astype(np.float64)[r0:r1, c0:c1] / 255.0
    gt_depth = view.load_depth()
    img = np.clip(rendered.rgb[r0:r1, c0:c1], 0.0, 1.0)
    valid = inside & (rendered.opacity >= opacity_min)
    coverage = float(valid.sum() / max(inside.sum(), 1))
    valid = valid if valid.any() else inside
    row = EvalRow(method, view.id, psnr(img, gt), ssim(img, gt),
                  depth_mae(rendered.depth, gt_depth, valid),
                  depth_mae(rendered.depth, gt_depth, band & valid if (band & valid).any() else band),
                  depth_mae(rendered.depth, gt_depth,
                            interior & valid if (interior & valid).any() else interior),
                  coverage, runtime_s=runtime_s, peak_bytes=peak_bytes)
    if reference is not None:
        ref_img = np.clip(reference.rgb[r0:r1, c0:c1], 0.0, 1.0)
        row.psnr_rel = psnr(img, ref_img)
        row.ssim_rel = ssim(img, ref_img)
        row.mae_rel = depth_mae(rendered.depth, reference.depth, valid)
    return row
