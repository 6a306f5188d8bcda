"""Dataset access, the per-(image, tile) crop cache and run manifests.

Dataset layout (written by :func:`tilenerf.synth.generate`)::

    manifest.json            ROI, z bounds, UTM origin, GSD, per-view entries
    images/view_{k}.png      8-bit RGB
    cameras/view_{k}.rpc     RPC key = value text (see camera module)
    gt/depth_{k}.npy         float32 depth along the ray from its z_max crossing

Crop cache layout (written by :func:`build_crop_cache`)::

    crops/index.json                 grid, margin and one entry per crop
    crops/view_{k}/r{R}_c{C}.npy     uint8 (rows, cols, 3) pixel block
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CropSpec, RationalCamera
from .tiler import Roi, TileGrid, build_grid

log = logging.getLogger(__name__)


@dataclass
class View:
    id: int
    camera: RationalCamera
    image_path: Path
    depth_path: Path
    held_out: bool
    off_nadir_deg: float
    azimuth_deg: float

    @property
    def shape(self) -> tuple:
        return self.camera.image_size

    def load_image(self) -> np.ndarray:
        return np.asarray(Image.open(self.image_path).convert("RGB"), dtype=np.uint8)

    def load_depth(self) -> np.ndarray:
        return np.load(self.depth_path)


class Dataset:
    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self.roi = Roi(**self.manifest["roi"])
        self.views = [
            View(v["id"], RationalCamera.load(self.root / v["camera"]), self.root / v["image"],
                 self.root / v["depth"], bool(v["held_out"]), float(v["off_nadir_deg"]),
                 float(v["azimuth_deg"]))
            for v in self.manifest["views"]
        ]

    @property
    def z_min(self) -> float:
        return self.roi.z_min

    @property
    def z_max(self) -> float:
        return self.roi.z_max

    @property
    def train_views(self) -> list:
        return [v for v in self.views if not v.held_out]

    @property
    def test_views(self) -> list:
        return [v for v in self.views if v.held_out]

    def view(self, k: int) -> View:
        return self.views[k]

    def nbytes_images(self, views=None) -> int:
        views = self.train_views if views is None else views
        return sum(3 * v.shape[0] * v.shape[1] for v in views)

    @cached_property
    def scene(self):
        from .synth import SceneSpec
        return SceneSpec.from_dict(self.manifest["scene"])


def pixel_to_continuous(rows, cols) -> np.ndarray:
    """Integer pixel indices to continuous coordinates of their centres."""
    return np.column_stack([np.asarray(rows) + 0.5, np.asarray(cols) + 0.5])


def rays_for_pixels(view: View, rows, cols, z_min: float, z_max: float):
    return view.camera.rays_from_pixels(pixel_to_continuous(rows, cols), z_min, z_max)


def in_roi(origins, directions, roi: Roi) -> np.ndarray:
    """Rays whose whole path between z_max and z_min stays over the ROI footprint."""
    t_bot = (roi.z_min - origins[:, 2]) / directions[:, 2]
    bottom = origins + t_bot[:, None] * directions

    def inside(p):
        return ((p[:, 0] >= roi.easting_min) & (p[:, 0] <= roi.easting_max)
                & (p[:, 1] >= roi.northing_min) & (p[:, 1] <= roi.northing_max))
    return inside(origins) & inside(bottom)


# -- crop cache -------------------------------------------------------------------

def crop_file(view_id: int, tile_id) -> str:
    r, c = tile_id
    return f"view_{view_id}/r{r}_c{c}.npy"


def build_crop_cache(dataset: Dataset, grid: TileGrid, out_dir, margin_px: int = 4,
                     workers: int = 1) -> dict:
    """Cut every training image into per-tile crops; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(view):
        img = view.load_image()
        (out / f"view_{view.id}").mkdir(exist_ok=True)
        entries = []
        for tile in grid.tiles:
            spec = view.camera.crop_for_tile(tile.box, margin_px, view.id, tile.id)
            if spec is None:
                continue
            r0, r1, c0, c1 = spec.pixel_rect
            name = crop_file(view.id, tile.id)
            np.save(out / name, np.ascontiguousarray(img[r0:r1, c0:c1]))
            entries.append(dict(view=view.id, tile=list(tile.id), rect=list(spec.pixel_rect),
                                file=name, nbytes=int((r1 - r0) * (c1 - c0) * 3)))
        return entries

    views = dataset.train_views
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            chunks = list(ex.map(one, views))
    else:
        chunks = [one(v) for v in views]
    entries = [e for chunk in chunks for e in chunk]
    index = dict(format="tilenerf-crops", version=1, grid=grid.to_dict(), margin_px=margin_px,
                 dataset=str(dataset.root), total_bytes=sum(e["nbytes"] for e in entries),
                 crops=entries)
    (out / "index.json").write_text(json.dumps(index, indent=1))
    log.info("crop cache: %d crops, %.1f MB", len(entries), index["total_bytes"] / 1e6)
    return index


class CropCache:
    """Reads crops from disk on demand; keeps only the crops of loaded tiles."""

    def __init__(self, root):
        self.root = Path(root)
        self.index = json.loads((self.root / "index.json").read_text())
        self.grid = build_grid(Roi(**self.index["grid"]["roi"]), self.index["grid"]["rows"],
                               self.index["grid"]["cols"])
        self.margin_px = self.index["margin_px"]
        self.by_tile: dict = {}
        for e in self.index["crops"]:
            self.by_tile.setdefault(tuple(e["tile"]), []).append(e)
        self.resident: dict = {}

    def specs(self, tile_id) -> list:
        return [CropSpec(e["view"], tuple(e["tile"]), tuple(e["rect"]))
                for e in self.by_tile.get(tuple(tile_id), [])]

    def load_tile(self, tile_id) -> None:
        tile_id = tuple(tile_id)
        self.resident[tile_id] = {e["view"]: (tuple(e["rect"]), np.load(self.root / e["file"]))
                                  for e in self.by_tile.get(tile_id, [])}

    def unload_tile(self, tile_id) -> None:
        self.resident.pop(tuple(tile_id), None)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for crops in self.resident.values() for _, a in crops.values())

    def colors(self, tile_id, view_id, rows, cols) -> np.ndarray:
        rect, arr = self.resident[tuple(tile_id)][view_id]
        return arr[np.asarray(rows) - rect[0], np.asarray(cols) - rect[2]]


class FullImageSource:
    """All training images resident; used by the reference mode and as the
    lossless-cache oracle."""

    def __init__(self, dataset: Dataset):
        self.images = {v.id: v.load_image() for v in dataset.train_views}

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.images.values())

    def colors(self, view_id, rows, cols) -> np.ndarray:
        return self.images[view_id][np.asarray(rows), np.asarray(cols)]


# -- run manifest -----------------------------------------------------------------

def write_run_manifest(path, **fields) -> dict:
    Path(path).write_text(json.dumps(fields, indent=2, default=_json_default))
    return fields


def read_run_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")
