"""Training loops: reference, unscaled and scaled (snake window) modes.

All three share :class:`FieldSet`, which renders rays through whichever
tile fields are resident and applies one optimizer step per iteration.
What differs is which fields are resident, which pixels are eligible and
where their colours come from:

* ``reference``: one field spanning the ROI, every in-ROI training ray.
* ``unscaled``: one tile at a time; rays crossing into neighbours are kept
  and sampled only inside the loaded tile.
* ``scaled``: a 2x2 window walks the snake path; a ray is used only if
  every tile it crosses is loaded.

Random streams are derived from ``(seed, position, iteration)`` and, for
occupancy updates, from ``(seed, tile, step count)``, so a run resumed from
checkpoints replays exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .field import FieldConfig, GlobalColorNet, TileField
from .geometry import intersect_rays_aabb, segment_rays
from .rendering import (RenderOutput, SamplingPolicy, color_loss, render, render_backward,
                        sample_segments)
from .scheduler import (MemoryLedger, TileStore, TrainPlan, WindowScheduler, accept_rays,
                        memory_report)
from .tiler import Tile, TileGrid, build_grid

log = logging.getLogger(__name__)

MODES = ("reference", "unscaled", "scaled")


@dataclass
class TrainConfig:
    mode: str = "scaled"
    grid: tuple = (2, 2)
    n_it: int = 200
    reference_n_it: Optional[int] = None  # total; defaults to n_it per window position
    batch_size: int = 1024
    seed: int = 0
    margin_px: int = 4
    background: tuple = (0.5, 0.5, 0.5)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sampling: SamplingPolicy = dc_field(default_factory=SamplingPolicy)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.grid = tuple(int(v) for v in self.grid)
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        if isinstance(self.sampling, dict):
            self.sampling = SamplingPolicy(**self.sampling)
        self.background = tuple(float(v) for v in self.background)

    @property
    def total_reference_iterations(self) -> int:
        if self.reference_n_it is not None:
            return int(self.reference_n_it)
        return self.n_it * len(TrainPlan.build(*self.grid, 1).positions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def reference_field_config(cfg: FieldConfig, grid_shape) -> FieldConfig:
    """Field settings for one ROI-wide field matching the per-metre resolution
    and the total table capacity of a grid of tile fields."""
    s = max(grid_shape)
    extra = int(np.ceil(np.log2(grid_shape[0] * grid_shape[1])))
    return replace(cfg, base_resolution=cfg.base_resolution * s,
                   max_resolution=cfg.max_resolution * s,
                   log2_table_size=cfg.log2_table_size + extra)


def _nbytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, dict):
        return sum(_nbytes(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return sum(_nbytes(v) for v in obj)
    if hasattr(obj, "__dataclass_fields__"):
        return sum(_nbytes(getattr(obj, k)) for k in obj.__dataclass_fields__)
    return 0


def occupancy_rng(seed: int, tile_id, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x0CC, int(tile_id[0]) + 1, int(tile_id[1]) + 1,
                                  int(step)])


def batch_rng(seed: int, position_index: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0xBA7, int(position_index), int(iteration)])


@dataclass
class Pass:
    """Everything the backward pass needs from one forward pass."""
    batch: object
    density: list     # (tile_id, sample indices, field cache)
    rgb: np.ndarray   # per-sample colour
    color: object
    render: object


class FieldSet:
    """The resident tile fields and the shared colour net."""

    def __init__(self, tiles: dict, fields: dict, color_net: GlobalColorNet,
                 policy: SamplingPolicy, background, z_min: float, seed: int = 0):
        self.tiles = tiles
        self.fields = fields
        self.color_net = color_net
        self.policy = policy
        self.background = background
        self.z_min = z_min
        self.seed = seed

    @property
    def ids(self) -> list:
        return sorted(self.fields)

    def forward(self, origins, directions, rng=None, cull: bool = True):
        ids = self.ids
        mins = np.array([self.tiles[t].box.min_corner for t in ids])
        maxs = np.array([self.tiles[t].box.max_corner for t in ids])
        seg = segment_rays(origins, directions, mins, maxs, max_segments=min(len(ids), 8))
        t_exit = (self.z_min - origins[:, 2]) / directions[:, 2]
        batch = sample_segments(seg, self.policy, t_exit, rng)
        pts = origins[batch.ray_index] + batch.t[:, None] * directions[batch.ray_index]
        local = np.empty_like(pts)
        for slot, tid in enumerate(ids):
            sel = batch.tile_slot == slot
            local[sel] = self.tiles[tid].to_local(pts[sel])
        if cull:
            keep = batch.is_endpoint.copy()
            for slot, tid in enumerate(ids):
                sel = np.flatnonzero(batch.tile_slot == slot)
                keep[sel] |= self.fields[tid].occupancy.occupied(local[sel])
            batch = batch.subset(keep)
            local = local[keep]
        cfg = self.color_net.cfg
        sigma = np.zeros(len(batch), dtype=self.color_net.dtype)
        emb = np.zeros((len(batch), cfg.embedding_dim), dtype=self.color_net.dtype)
        density = []
        for slot, tid in enumerate(ids):
            sel = np.flatnonzero(batch.tile_slot == slot)
            if sel.size == 0:
                continue
            s, e, cache = self.fields[tid].query_density(local[sel])
            sigma[sel] = s
            emb[sel] = e
            density.append((tid, sel, cache))
        rgb, ccache = self.color_net.query_color(emb, directions[batch.ray_index])
        out, rcache = render(sigma, rgb, batch, self.background)
        return out, Pass(batch, density, rgb, ccache, rcache)

    def gradients(self, origins, directions, target, rng=None, cull: bool = True):
        """Loss and exact gradients for every resident parameter group.

        Returns ``(loss, {tile_id: grads}, colour grads, bytes held by the
        batch buffers)``.  Tiles without samples get no entry.
        """
        out, p = self.forward(origins, directions, rng, cull)
        loss, g = color_loss(out.rgb, target)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")
        d_sigma, d_rgb = render_backward(p.render, p.rgb, g)
        color_grads, d_emb = self.color_net.backward(p.color, d_rgb)
        grads = {tid: self.fields[tid].backward(cache, d_sigma[sel], d_emb[sel])
                 for tid, sel, cache in p.density}
        return loss, grads, color_grads, _nbytes(p) + _nbytes(out) + _nbytes(grads)

    def train_step(self, origins, directions, target, rng) -> tuple:
        """One iteration; returns ``(loss, bytes held by the batch buffers)``."""
        loss, grads, color_grads, buffers = self.gradients(origins, directions, target, rng)
        for tid in self.ids:
            self.fields[tid].apply_gradients(grads.get(tid, {}))
        self.color_net.apply_gradients(color_grads)
        for tid in self.ids:
            f = self.fields[tid]
            if f.step_count % f.cfg.occupancy_interval == 0:
                f.occupancy.update(f.density, occupancy_rng(self.seed, tid, f.step_count))
        return loss, buffers

    def render_rays(self, origins, directions, chunk: int = 8192) -> RenderOutput:
        """Deterministic (unjittered) rendering in chunks."""
        outs = [self.forward(origins[k:k + chunk], directions[k:k + chunk], None)[0]
                for k in range(0, len(origins), chunk)]
        if not outs:
            z = np.zeros(0, dtype=np.float32)
            return RenderOutput(np.zeros((0, 3), np.float32), z, z)
        return RenderOutput(np.concatenate([o.rgb for o in outs]),
                            np.concatenate([o.depth for o in outs]),
                            np.concatenate([o.opacity for o in outs]))


# -- pixel pools ----------------------------------------------------------------------

@dataclass
class PixelPool:
    """Eligible training pixels; ``source`` indexes ``source_ids`` (the tile
    whose crop holds the pixel, or -1 when full images are resident).

    Once filtered, the pool also keeps each pixel's ray so batches skip the
    camera inversion.
    """
    view: np.ndarray
    row: np.ndarray
    col: np.ndarray
    source: np.ndarray
    source_ids: list
    origins: Optional[np.ndarray] = None
    directions: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.view)

    def nbytes(self) -> int:
        arrays = (self.view, self.row, self.col, self.source, self.origins, self.directions)
        return sum(a.nbytes for a in arrays if a is not None)

    def subset(self, keep) -> "PixelPool":
        rays = [None if a is None else a[keep] for a in (self.origins, self.directions)]
        return PixelPool(self.view[keep], self.row[keep], self.col[keep], self.source[keep],
                         self.source_ids, *rays)


def pool_from_crops(dataset: dataio.Dataset, crops: dataio.CropCache, tile_ids) -> PixelPool:
    """Pixels covered by the crops of ``tile_ids``; each tagged with the
    first tile whose crop contains it."""
    tile_ids = sorted(tuple(t) for t in tile_ids)
    views, rows, cols, srcs = [], [], [], []
    for v in dataset.train_views:
        owner = np.full(v.shape, -1, dtype=np.int8)
        for k, tid in enumerate(tile_ids):
            for spec in crops.specs(tid):
                if spec.image_id != v.id:
                    continue
                r0, r1, c0, c1 = spec.pixel_rect
                block = owner[r0:r1, c0:c1]
                block[block < 0] = k
        r, c = np.nonzero(owner >= 0)
        views.append(np.full(len(r), v.id, dtype=np.int16))
        rows.append(r.astype(np.int32))
        cols.append(c.astype(np.int32))
        srcs.append(owner[r, c])
    return PixelPool(np.concatenate(views), np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(srcs), tile_ids)


def pool_full(dataset: dataio.Dataset) -> PixelPool:
    views, rows, cols = [], [], []
    for v in dataset.train_views:
        r, c = np.nonzero(np.ones(v.shape, dtype=bool))
        views.append(np.full(len(r), v.id, dtype=np.int16))
        rows.append(r.astype(np.int32))
        cols.append(c.astype(np.int32))
    view = np.concatenate(views)
    return PixelPool(view, np.concatenate(rows), np.concatenate(cols),
                     np.full(len(view), -1, dtype=np.int8), [])


def pool_rays(dataset: dataio.Dataset, pool: PixelPool, idx=None):
    """Rays for ``pool`` pixels (all, or ``idx``)."""
    idx = np.arange(len(pool)) if idx is None else np.asarray(idx)
    if pool.origins is not None:
        return pool.origins[idx], pool.directions[idx]
    o = np.empty((len(idx), 3))
    d = np.empty((len(idx), 3))
    views = pool.view[idx]
    for vid in np.unique(views):
        sel = np.flatnonzero(views == vid)
        o[sel], d[sel] = dataio.rays_for_pixels(dataset.view(int(vid)), pool.row[idx[sel]],
                                                pool.col[idx[sel]], dataset.z_min, dataset.z_max)
    return o, d


def filter_pool(dataset, pool: PixelPool, rule, chunk: int = 65536) -> PixelPool:
    """Keep in-ROI pixels whose rays satisfy ``rule(origins, directions)``."""
    keep = np.zeros(len(pool), dtype=bool)
    origins = np.empty((len(pool), 3))
    directions = np.empty((len(pool), 3))
    for k in range(0, len(pool), chunk):
        idx = np.arange(k, min(k + chunk, len(pool)))
        o, d = pool_rays(dataset, pool, idx)
        keep[idx] = dataio.in_roi(o, d, dataset.roi) & rule(o, d)
        origins[idx], directions[idx] = o, d
    pool = replace(pool, origins=origins, directions=directions)
    return pool.subset(keep)


class ColorSource:
    """Target colours for pool pixels, from crops or from full images."""

    def __init__(self, crops: Optional[dataio.CropCache] = None,
                 full: Optional[dataio.FullImageSource] = None):
        if (crops is None) == (full is None):
            raise ValueError("give exactly one of crops / full images")
        self.crops = crops
        self.full = full

    @property
    def nbytes(self) -> int:
        return self.crops.nbytes if self.crops is not None else self.full.nbytes

    def lookup(self, pool: PixelPool, idx) -> np.ndarray:
        out = np.empty((len(idx), 3), dtype=np.uint8)
        views, srcs = pool.view[idx], pool.source[idx]
        rows, cols = pool.row[idx], pool.col[idx]
        for vid in np.unique(views):
            vsel = views == vid
            if self.full is not None:
                out[vsel] = self.full.colors(int(vid), rows[vsel], cols[vsel])
                continue
            for s in np.unique(srcs[vsel]):
                sel = vsel & (srcs == s)
                out[sel] = self.crops.colors(pool.source_ids[s], int(vid), rows[sel], cols[sel])
        return out

    def targets(self, pool, idx) -> np.ndarray:
        return self.lookup(pool, idx).astype(np.float64) / 255.0


# -- run bookkeeping ------------------------------------------------------------------

class RunLog:
    """Line-delimited JSON training records."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.fh = open(self.path, "a" if append else "w")

    def write(self, **rec) -> None:
        self.fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self.fh.close()


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class TrainResult:
    run_dir: Path
    mode: str
    iterations: int
    wall_s: float
    peak_bytes: int
    final_loss: float
    complete: bool = True


def _iterate(fs: FieldSet, dataset, pool: PixelPool, colors: ColorSource, cfg: TrainConfig,
             n_it: int, position_index: int, position, ledger: MemoryLedger, report,
             runlog: RunLog, it_offset: int):
    if len(pool) == 0:
        raise RuntimeError(f"no eligible rays at window position {position}")
    loss = float("nan")
    for it in range(n_it):
        t0 = time.perf_counter()
        rng = batch_rng(cfg.seed, position_index, it)
        idx = np.sort(rng.integers(0, len(pool), cfg.batch_size))
        o, d = pool_rays(dataset, pool, idx)
        target = colors.targets(pool, idx)
        try:
            loss, buffers = fs.train_step(o, d, target, rng)
        except FloatingPointError as exc:
            raise FloatingPointError(f"position {position}, iteration {it}: {exc}") from exc
        ledger.batch_buffers = buffers
        rep = report()
        ledger.peak_total = max(ledger.peak_total, rep["total"])
        runlog.write(iteration=it_offset + it, position=list(position), local_iteration=it,
                     loss=loss, t_ms=1e3 * (time.perf_counter() - t0), bytes=rep["total"])
    return loss


def _write_manifest(out: Path, cfg: TrainConfig, dataset, grid: TileGrid, plan=None, **extra):
    fields = dict(format="tilenerf-run", version=1, config=cfg.to_dict(), dataset=str(dataset.root),
                  grid=grid.to_dict(), layout=dict(tiles="tiles/r{R}_c{C}.ckpt",
                                                   color="color_net.ckpt", log="log.jsonl"))
    if plan is not None:
        visits = plan.visit_counts
        fields["plan"] = plan.to_dict()
        fields["accounting"] = dict(
            window_iterations=plan.total_iterations,
            tile_iterations={f"r{r}_c{c}": n * plan.n_it for (r, c), n in sorted(visits.items())},
            time_model_tiles_x_n_it=grid.rows * grid.cols * plan.n_it)
    fields.update(extra)
    dataio.write_run_manifest(out / "run.json", **fields)


def _field_config(cfg: TrainConfig, grid: TileGrid) -> FieldConfig:
    if cfg.mode == "reference":
        return reference_field_config(cfg.field, grid.shape)
    return cfg.field


def reference_tile(roi) -> Tile:
    return Tile((0, 0), roi.box)


# -- modes ----------------------------------------------------------------------------

def train(dataset: dataio.Dataset, cfg: TrainConfig, out_dir, crop_dir=None,
          stop_after: Optional[int] = None, pixel_source: str = "crops") -> TrainResult:
    """Run one mode into ``out_dir`` (checkpoints, ``log.jsonl``, ``run.json``).

    ``stop_after`` ends a scaled run after that many window positions with
    everything checkpointed; calling again resumes.  ``pixel_source="full"``
    keeps whole images resident instead of reading crops.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "reference":
        return _train_reference(dataset, cfg, out)
    grid = build_grid(dataset.roi, *cfg.grid)
    crop_dir = Path(crop_dir) if crop_dir is not None else out / "crops"
    if not (crop_dir / "index.json").exists():
        dataio.build_crop_cache(dataset, grid, crop_dir, cfg.margin_px)
    crops = dataio.CropCache(crop_dir)
    if crops.grid.shape != grid.shape or crops.margin_px != cfg.margin_px:
        raise ValueError(f"crop cache {crop_dir} was built for another grid or margin")
    if cfg.mode == "unscaled":
        return _train_unscaled(dataset, cfg, out, grid, crops, pixel_source)
    return _train_scaled(dataset, cfg, out, grid, crops, stop_after, pixel_source)


def _colors(dataset, crops, pixel_source) -> ColorSource:
    if pixel_source == "full":
        return ColorSource(full=dataio.FullImageSource(dataset))
    if pixel_source != "crops":
        raise ValueError(f"pixel_source must be 'crops' or 'full', got {pixel_source!r}")
    return ColorSource(crops=crops)


def _train_scaled(dataset, cfg, out, grid, crops, stop_after, pixel_source) -> TrainResult:
    plan = TrainPlan.build(grid.rows, grid.cols, cfg.n_it)
    state_path = out / "state.json"
    start = json.loads(state_path.read_text())["next_position"] if state_path.exists() else 0
    if start == 0:
        for p in (out / "tiles").glob("*.ckpt") if (out / "tiles").exists() else []:
            p.unlink()
        (out / "color_net.ckpt").unlink(missing_ok=True)
    if start >= len(plan.positions):
        raise RuntimeError(f"run in {out} is already complete")
    _write_manifest(out, cfg, dataset, grid, plan, crop_dir=str(crops.root))
    store = TileStore(out, cfg.field, cfg.seed)
    colors = _colors(dataset, crops, pixel_source)
    sched = WindowScheduler(grid, store, plan, on_load=crops.load_tile,
                            on_unload=crops.unload_tile)
    runlog = RunLog(out / "log.jsonl", append=start > 0)
    t_start = time.perf_counter()
    loss = float("nan")
    end = len(plan.positions) if stop_after is None else min(len(plan.positions), start + stop_after)
    try:
        sched.start(plan.positions[start])
        for k in range(start, end):
            pos = plan.positions[k]
            if k > start:
                sched.advance(pos)
            loaded = sorted(sched.loaded)
            sched.ledger.crops = colors.nbytes
            pool = pool_from_crops(dataset, crops, loaded)
            pool = filter_pool(dataset, pool,
                               lambda o, d: accept_rays(o, d, loaded, grid))
            sched.ledger.ray_index = pool.nbytes()
            fs = FieldSet({t: grid.tile(*t) for t in loaded}, sched.loaded, sched.color_net,
                          cfg.sampling, cfg.background, dataset.z_min, cfg.seed)
            log.info("position %s: %d accepted rays", pos, len(pool))
            loss = _iterate(fs, dataset, pool, colors, cfg, cfg.n_it, k, pos, sched.ledger,
                            sched.memory_report, runlog, k * cfg.n_it)
        sched.finish()
    finally:
        runlog.close()
    state_path.write_text(json.dumps({"next_position": end}))
    return TrainResult(out, "scaled", (end - start) * cfg.n_it, time.perf_counter() - t_start,
                       sched.ledger.peak_total, loss, end == len(plan.positions))


def _train_unscaled(dataset, cfg, out, grid, crops, pixel_source) -> TrainResult:
    for p in (out / "tiles").glob("*.ckpt") if (out / "tiles").exists() else []:
        p.unlink()
    _write_manifest(out, cfg, dataset, grid, crop_dir=str(crops.root))
    store = TileStore(out, cfg.field, cfg.seed)
    colors = _colors(dataset, crops, pixel_source)
    color_net = GlobalColorNet(cfg.field, seed=cfg.seed)
    ledger = MemoryLedger()
    runlog = RunLog(out / "log.jsonl")
    t_start = time.perf_counter()
    loss = float("nan")
    try:
        for k, tid in enumerate(grid.tile_ids):
            tile = grid.tile(*tid)
            fieldobj = store.load(tid)
            crops.load_tile(tid)
            ledger.crops = colors.nbytes
            box_lo, box_hi = tile.box.min_corner, tile.box.max_corner

            def touches(o, d):
                return intersect_rays_aabb(o, d, box_lo, box_hi)[2]
            pool = filter_pool(dataset, pool_from_crops(dataset, crops, [tid]), touches)
            ledger.ray_index = pool.nbytes()
            fs = FieldSet({tid: tile}, {tid: fieldobj}, color_net, cfg.sampling, cfg.background,
                          dataset.z_min, cfg.seed)
            loss = _iterate(fs, dataset, pool, colors, cfg, cfg.n_it, k, tid, ledger,
                            lambda: memory_report([fieldobj], color_net, ledger), runlog,
                            k * cfg.n_it)
            store.save(fieldobj)
            crops.unload_tile(tid)
        store.save_color(color_net)
    finally:
        runlog.close()
    return TrainResult(out, "unscaled", grid.rows * grid.cols * cfg.n_it,
                       time.perf_counter() - t_start, ledger.peak_total, loss)


def _train_reference(dataset, cfg, out) -> TrainResult:
    grid = build_grid(dataset.roi, 1, 1)
    fcfg = reference_field_config(cfg.field, cfg.grid)
    _write_manifest(out, cfg, dataset, grid, reference_field=fcfg.to_dict())
    store = TileStore(out, fcfg, cfg.seed)
    colors = ColorSource(full=dataio.FullImageSource(dataset))
    tile = reference_tile(dataset.roi)
    fieldobj = TileField(tile.id, fcfg, seed=cfg.seed)
    color_net = GlobalColorNet(fcfg, seed=cfg.seed)
    ledger = MemoryLedger(crops=colors.nbytes)
    pool = filter_pool(dataset, pool_full(dataset), lambda o, d: np.ones(len(o), dtype=bool))
    ledger.ray_index = pool.nbytes()
    fs = FieldSet({tile.id: tile}, {tile.id: fieldobj}, color_net, cfg.sampling, cfg.background,
                  dataset.z_min, cfg.seed)
    runlog = RunLog(out / "log.jsonl")
    t_start = time.perf_counter()
    n_it = cfg.total_reference_iterations
    try:
        loss = _iterate(fs, dataset, pool, colors, cfg, n_it, 0, (0, 0), ledger,
                        lambda: memory_report([fieldobj], color_net, ledger), runlog, 0)
    finally:
        runlog.close()
    store.save(fieldobj)
    store.save_color(color_net)
    return TrainResult(out, "reference", n_it, time.perf_counter() - t_start, ledger.peak_total,
                       loss)


# -- evaluation-time access -------------------------------------------------------------

def load_run(run_dir) -> tuple:
    """``(FieldSet with every tile resident, run manifest)`` for rendering."""
    run_dir = Path(run_dir)
    manifest = dataio.read_run_manifest(run_dir / "run.json")
    cfg = TrainConfig.from_dict(manifest["config"])
    grid = TileGrid.from_dict(manifest["grid"])
    fcfg = FieldConfig(**manifest["reference_field"]) if cfg.mode == "reference" else cfg.field
    store = TileStore(run_dir, fcfg, cfg.seed)
    tiles = {t.id: t for t in grid.tiles}
    fields = {tid: store.load(tid) for tid in tiles}
    fs = FieldSet(tiles, fields, store.load_color(), cfg.sampling, cfg.background,
                  grid.roi.z_min, cfg.seed)
    return fs, manifest


def render_view(fs: FieldSet, view: dataio.View, z_min: float, z_max: float,
                chunk: int = 8192) -> RenderOutput:
    """Render every pixel of ``view``; arrays are shaped like the image."""
    rows, cols = view.shape
    r, c = np.nonzero(np.ones((rows, cols), dtype=bool))
    o, d = dataio.rays_for_pixels(view, r, c, z_min, z_max)
    out = fs.render_rays(o, d, chunk)
    return RenderOutput(out.rgb.reshape(rows, cols, 3), out.depth.reshape(rows, cols),
                        out.opacity.reshape(rows, cols))


# -- catastrophic forgetting ------------------------------------------------------------

@dataclass
class ForgettingResult:
    psnr: np.ndarray        # (stage, quadrant), quadrants in grid order
    order: list             # quadrant index trained at each stage
    interleaved: bool

    @property
    def drop_first(self) -> float:
        """PSNR lost on the first-trained quadrant between the first and last stage."""
        q = self.order[0]
        return float(self.psnr[0, q] - self.psnr[-1, q])

    def to_dict(self) -> dict:
        return dict(psnr=self.psnr.tolist(), order=list(self.order),
                    interleaved=self.interleaved, drop_first=self.drop_first)


def forgetting_experiment(dataset: dataio.Dataset, cfg: TrainConfig, n_stage: int,
                          order=(0, 1, 2, 3), interleaved: bool = False,
                          eval_view: Optional[dataio.View] = None) -> ForgettingResult:
    """Train one ROI-wide field on the quadrants' rays one after another.

    Quadrant ``q`` owns the training rays that intersect it.  After every
    stage the held-out view is rendered and scored per quadrant, giving a
    stage x quadrant PSNR matrix.  ``interleaved`` is the control: every
    stage draws from all quadrants.
    """
    from .evalio import psnr, view_quadrant_labels

    quads = build_grid(dataset.roi, 2, 2)
    fcfg = reference_field_config(cfg.field, (2, 2))
    tile = reference_tile(dataset.roi)
    fieldobj = TileField(tile.id, fcfg, seed=cfg.seed)
    color_net = GlobalColorNet(fcfg, seed=cfg.seed)
    fs = FieldSet({tile.id: tile}, {tile.id: fieldobj}, color_net, cfg.sampling, cfg.background,
                  dataset.z_min, cfg.seed)
    colors = ColorSource(full=dataio.FullImageSource(dataset))
    pool = filter_pool(dataset, pool_full(dataset), lambda o, d: np.ones(len(o), dtype=bool))
    o, d = pool_rays(dataset, pool)
    mins, maxs = quads.box_arrays()
    member = intersect_rays_aabb(o, d, mins, maxs)[2]          # (n, 4)
    del o, d

    view = eval_view if eval_view is not None else dataset.test_views[0]
    gt = view.load_image().astype(np.float64) / 255.0
    labels = view_quadrant_labels(view, quads, dataset.z_min, dataset.z_max)
    ledger = MemoryLedger()
    matrix = np.zeros((len(order), 4))
    for stage, q in enumerate(order):
        sub = pool if interleaved else pool.subset(member[:, q])
        _iterate(fs, dataset, sub, colors, cfg, n_stage, 100 + stage, (stage, q), ledger,
                 lambda: {"total": 0}, _NullLog(), 0)
        img = render_view(fs, view, dataset.z_min, dataset.z_max).rgb
        for qq in range(4):
            m = labels == qq
            matrix[stage, qq] = psnr(img[m], gt[m])
        log.info("forgetting stage %d (quadrant %d): %s", stage, q, np.round(matrix[stage], 2))
    return ForgettingResult(matrix, list(order), interleaved)


class _NullLog:
    def write(self, **rec) -> None:
        pass
