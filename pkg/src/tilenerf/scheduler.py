"""Out-of-core window scheduling over the tile grid.

A 2x2 window of tiles is resident at a time.  It walks the grid in a
serpentine order so that each move swaps exactly two tiles; outgoing tiles
are checkpointed to disk together with their optimizer state and restored
untouched when the window comes back.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import field as fld
from .geometry import intersect_rays_aabb
from .tiler import TileGrid

log = logging.getLogger(__name__)


def snake_path(H: int, W: int) -> list:
    """Serpentine order over the (H-1) x (W-1) window positions.

    Rows of positions go south to north; even rows run west to east, odd
    rows east to west.
    """
    if H < 2 or W < 2:
        raise ValueError(f"snake path needs a grid of at least 2x2, got {H}x{W}")
    path = []
    for i in range(H - 1):
        cols = range(W - 1) if i % 2 == 0 else range(W - 2, -1, -1)
        path += [(i, j) for j in cols]
    return path


def window_tiles(position, window=(2, 2)) -> frozenset:
    i, j = position
    return frozenset((i + a, j + b) for a in range(window[0]) for b in range(window[1]))


def window_shape(H: int, W: int) -> tuple:
    return (min(2, H), min(2, W))


def window_path(H: int, W: int) -> list:
    """Like :func:`snake_path` but also covers 1xN / Nx1 grids (experimental)."""
    if H >= 2 and W >= 2:
        return snake_path(H, W)
    if H < 1 or W < 1:
        raise ValueError("grid must be at least 1x1")
    log.warning("grid %dx%d: using the experimental %dx%d window", H, W, *window_shape(H, W))
    wh, ww = window_shape(H, W)
    return [(i, j) for i in range(H - wh + 1) for j in range(W - ww + 1)]


@dataclass
class TrainPlan:
    grid_shape: tuple
    positions: list
    n_it: int
    window: tuple = (2, 2)

    @classmethod
    def build(cls, H: int, W: int, n_it: int) -> "TrainPlan":
        return cls((H, W), window_path(H, W), int(n_it), window_shape(H, W))

    @property
    def visit_counts(self) -> dict:
        c = Counter()
        for p in self.positions:
            c.update(window_tiles(p, self.window))
        return dict(c)

    @property
    def total_iterations(self) -> int:
        return self.n_it * len(self.positions)

    def to_dict(self) -> dict:
        return dict(grid_shape=list(self.grid_shape), positions=[list(p) for p in self.positions],
                    n_it=self.n_it, window=list(self.window))


@dataclass
class WindowState:
    position: tuple
    loaded_tiles: frozenset
    iterations_done_here: int = 0


@dataclass(frozen=True)
class Action:
    kind: str  # "load" | "unload"
    tile_id: tuple


def plan_move(state: WindowState, new_position, window=(2, 2)):
    """Actions to go from ``state`` to ``new_position``, and the new state."""
    new_tiles = window_tiles(new_position, window)
    out = sorted(state.loaded_tiles - new_tiles)
    inc = sorted(new_tiles - state.loaded_tiles)
    actions = [Action("unload", t) for t in out] + [Action("load", t) for t in inc]
    return actions, WindowState(tuple(new_position), new_tiles, 0)


def accept_rays(origins, directions, loaded_ids, grid: TileGrid) -> np.ndarray:
    """Rays whose every intersected tile is loaded (and that hit at least one)."""
    ids = grid.tile_ids
    mins, maxs = grid.box_arrays(ids)
    _, _, hit = intersect_rays_aabb(origins, directions, mins, maxs)
    loaded = np.array([t in set(map(tuple, loaded_ids)) for t in ids])
    return hit.any(axis=1) & ~(hit & ~loaded).any(axis=1)


# -- checkpoint store --------------------------------------------------------------

class TileStore:
    """Checkpoint directory: ``tiles/r{R}_c{C}.ckpt`` and ``color_net.ckpt``."""

    def __init__(self, root, cfg: fld.FieldConfig, seed: int = 0):
        self.root = Path(root)
        (self.root / "tiles").mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.seed = seed

    def tile_path(self, tile_id) -> Path:
        r, c = tile_id
        return self.root / "tiles" / f"r{r}_c{c}.ckpt"

    @property
    def color_path(self) -> Path:
        return self.root / "color_net.ckpt"

    def has(self, tile_id) -> bool:
        return self.tile_path(tile_id).exists()

    def load(self, tile_id) -> fld.TileField:
        p = self.tile_path(tile_id)
        if p.exists():
            return fld.load_tile(p)
        return fld.TileField(tile_id, self.cfg, seed=self.seed)

    def save(self, tile: fld.TileField) -> None:
        fld.save_tile(tile, self.tile_path(tile.tile_id))

    def load_color(self) -> fld.GlobalColorNet:
        if self.color_path.exists():
            return fld.load_color_net(self.color_path)
        return fld.GlobalColorNet(self.cfg, seed=self.seed)

    def save_color(self, net: fld.GlobalColorNet) -> None:
        fld.save_color_net(net, self.color_path)


def memory_report(fields, color_net, ledger: MemoryLedger) -> dict:
    """Live bytes by category for resident fields plus the ledger's buffers."""
    tile_params = tile_moments = occupancy = 0
    for f in fields:
        nb = f.nbytes()
        tile_params += nb["params"]
        tile_moments += nb["moments"]
        occupancy += nb["occupancy"]
    color = color_net.nbytes()
    rep = dict(tile_params=tile_params, tile_moments=tile_moments, occupancy=occupancy,
               color_params=color["params"], color_moments=color["moments"],
               crops=ledger.crops, ray_index=ledger.ray_index,
               batch_buffers=ledger.batch_buffers)
    rep["total"] = sum(rep.values())
    return rep


# -- the conductor ----------------------------------------------------------------

@dataclass
class MemoryLedger:
    """Live-byte accounting for everything the training loop keeps resident."""
    crops: int = 0
    ray_index: int = 0
    batch_buffers: int = 0
    peak_total: int = 0
    extra: dict = field(default_factory=dict)


class WindowScheduler:
    """Keeps the window's tiles in memory and swaps them on :meth:`advance`.

    ``on_load``/``on_unload`` callbacks let the trainer attach and release
    per-tile data (image crops) alongside the fields.
    """

    def __init__(self, grid: TileGrid, store: TileStore, plan: TrainPlan,
                 on_load: Optional[Callable] = None, on_unload: Optional[Callable] = None):
        self.grid = grid
        self.store = store
        self.plan = plan
        self.on_load = on_load
        self.on_unload = on_unload
        self.loaded: dict = {}
        self.state: Optional[WindowState] = None
        self.color_net = store.load_color()
        self.ledger = MemoryLedger()
        self.visits = Counter()
        self.history: list = []

    def _load(self, tile_id):
        tile = self.store.load(tile_id)
        if self.on_load is not None:
            self.on_load(tile_id)
        self.loaded[tile_id] = tile
        self.visits[tile_id] += 1

    def _unload(self, tile_id):
        self.store.save(self.loaded[tile_id])
        del self.loaded[tile_id]
        if self.on_unload is not None:
            self.on_unload(tile_id)

    def start(self, position=None):
        position = tuple(self.plan.positions[0] if position is None else position)
        tiles = window_tiles(position, self.plan.window)
        for t in sorted(tiles):
            self._load(t)
        self.state = WindowState(position, tiles, 0)
        self.history.append([Action("load", t) for t in sorted(tiles)])
        return self.state

    def advance(self, new_position) -> list:
        """Swap tiles to reach ``new_position``; atomic on load failure."""
        actions, new_state = plan_move(self.state, new_position, self.plan.window)
        unloads = [a.tile_id for a in actions if a.kind == "unload"]
        loads = [a.tile_id for a in actions if a.kind == "load"]
        for t in unloads:
            self._unload(t)
        done = []
        try:
            for t in loads:
                self._load(t)
                done.append(t)
        except Exception as exc:
            for t in done:
                del self.loaded[t]
                self.visits[t] -= 1
                if self.on_unload is not None:
                    self.on_unload(t)
            for t in unloads:
                self._load(t)
                self.visits[t] -= 1
            raise IOError(f"failed to load tile {loads[len(done)]}: {exc}") from exc
        self.state = new_state
        self.history.append(actions)
        return actions

    def finish(self) -> None:
        for t in sorted(self.loaded):
            self._unload(t)
        self.store.save_color(self.color_net)

    def memory_report(self) -> dict:
        rep = memory_report(self.loaded.values(), self.color_net, self.ledger)
        self.ledger.peak_total = max(self.ledger.peak_total, rep["total"])
        return rep
