"""Regular east/north partition of the region of interest into 3D tiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Aabb3


@dataclass(frozen=True)
class Roi:
    easting_min: float
    easting_max: float
    northing_min: float
    northing_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.easting_max > self.easting_min and self.northing_max > self.northing_min):
            raise ValueError("ROI footprint must have positive extent")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")

    @property
    def box(self) -> Aabb3:
        return Aabb3(np.array([self.easting_min, self.northing_min, self.z_min]),
                     np.array([self.easting_max, self.northing_max, self.z_max]))

    @property
    def area(self) -> float:
        return (self.easting_max - self.easting_min) * (self.northing_max - self.northing_min)

    def to_dict(self) -> dict:
        return dict(easting_min=self.easting_min, easting_max=self.easting_max,
                    northing_min=self.northing_min, northing_max=self.northing_max,
                    z_min=self.z_min, z_max=self.z_max)


@dataclass(frozen=True)
class Tile:
    id: tuple
    box: Aabb3

    @property
    def scale(self) -> np.ndarray:
        return self.box.extent

    def to_local(self, points) -> np.ndarray:
        """Affine map of scene-frame points into the tile's unit cube."""
        return (np.asarray(points, dtype=np.float64) - self.box.min_corner) / self.box.extent

    def from_local(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.box.extent + self.box.min_corner

    def ray_to_local(self, origins, directions):
        """Map rays into the tile frame.

        Returns ``(origin_local, dir_local, factor)`` where ``dir_local`` is
        unit-norm and a metric distance ``t`` along the original ray equals
        ``t_local / factor`` along the local one.
        """
        o = self.to_local(origins)
        d = np.asarray(directions, dtype=np.float64) / self.box.extent
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        return o, d / norm, norm[..., 0]


@dataclass(frozen=True)
class TileGrid:
    roi: Roi
    rows: int
    cols: int
    easting_edges: np.ndarray
    northing_edges: np.ndarray

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def tile(self, r: int, c: int) -> Tile:
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise IndexError(f"tile ({r}, {c}) outside {self.rows}x{self.cols} grid")
        lo = np.array([self.easting_edges[c], self.northing_edges[r], self.roi.z_min])
        hi = np.array([self.easting_edges[c + 1], self.northing_edges[r + 1], self.roi.z_max])
        return Tile((r, c), Aabb3(lo, hi))

    @property
    def tiles(self) -> list:
        return [self.tile(r, c) for r in range(self.rows) for c in range(self.cols)]

    @property
    def tile_ids(self) -> list:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def box_arrays(self, ids=None):
        """Stacked ``(mins, maxs)`` for ``ids`` (all tiles by default)."""
        ids = self.tile_ids if ids is None else list(ids)
        boxes = [self.tile(r, c).box for r, c in ids]
        return (np.array([b.min_corner for b in boxes]), np.array([b.max_corner for b in boxes]))

    def locate(self, easting, northing):
        """Tile (row, col) containing footprint points; -1 outside the ROI."""
        e = np.asarray(easting, dtype=np.float64)
        n = np.asarray(northing, dtype=np.float64)
        c = np.searchsorted(self.easting_edges, e, side="right") - 1
        r = np.searchsorted(self.northing_edges, n, side="right") - 1
        # points exactly on the outer max edge belong to the last cell
        c = np.where(e == self.easting_edges[-1], self.cols - 1, c)
        r = np.where(n == self.northing_edges[-1], self.rows - 1, r)
        outside = (c < 0) | (c >= self.cols) | (r < 0) | (r >= self.rows)
        return np.where(outside, -1, r), np.where(outside, -1, c)

    def to_dict(self) -> dict:
        return dict(roi=self.roi.to_dict(), rows=self.rows, cols=self.cols,
                    easting_edges=self.easting_edges.tolist(),
                    northing_edges=self.northing_edges.tolist())

    @classmethod
    def from_dict(cls, d: dict) -> "TileGrid":
        return build_grid(Roi(**d["roi"]), d["rows"], d["cols"])


def _edges(lo: float, hi: float, n: int) -> np.ndarray:
    # one division per grid line so neighbours share bit-identical edges
    k = np.arange(n + 1, dtype=np.float64)
    edges = lo + k * (hi - lo) / n
    edges[-1] = hi
    return edges


def build_grid(roi: Roi, rows: int, cols: int) -> TileGrid:
    if rows < 1 or cols < 1:
        raise ValueError(f"grid shape must be at least 1x1, got {rows}x{cols}")
    return TileGrid(roi, int(rows), int(cols),
                    _edges(roi.easting_min, roi.easting_max, cols),
                    _edges(roi.northing_min, roi.northing_max, rows))
