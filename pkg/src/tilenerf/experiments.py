"""Multi-run experiments: the three-mode comparison and the scaling series."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataio, evalio, synth, trainer
from .scheduler import TrainPlan
from .tiler import build_grid

log = logging.getLogger(__name__)


@dataclass
class Comparison:
    report: evalio.EvalReport
    renders: dict          # mode -> RenderOutput of the evaluation view
    results: dict          # mode -> TrainResult
    masks: tuple           # (inside, band, interior)


def compare_modes(dataset: dataio.Dataset, cfg: trainer.TrainConfig, out_dir,
                  band_px: float = 8.0, modes=trainer.MODES, view=None,
                  reference_dir=None) -> Comparison:
    """Train each mode back to back and score them on the held-out view.

    The reference row has empty relative columns.  ``reference_dir`` reuses
    an existing reference run instead of training one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    view = view if view is not None else dataset.test_views[0]
    grid = build_grid(dataset.roi, *cfg.grid)
    inside = evalio.roi_mask(view, dataset.roi, dataset.z_min, dataset.z_max)
    masks = (inside,) + evalio.band_masks(view, grid, dataset.z_min, dataset.z_max, band_px,
                                          inside)
    crop_dir = out / "crops"
    if not (crop_dir / "index.json").exists():
        dataio.build_crop_cache(dataset, grid, crop_dir, cfg.margin_px)
    report = evalio.EvalReport()
    renders, results = {}, {}
    for mode in ["reference"] + [m for m in modes if m != "reference"]:
        if mode == "reference" and reference_dir is not None:
            run_dir, res = Path(reference_dir), None
        else:
            res = trainer.train(dataset, replace(cfg, mode=mode), out / mode, crop_dir=crop_dir)
            run_dir = res.run_dir
        fs, _ = trainer.load_run(run_dir)
        renders[mode] = trainer.render_view(fs, view, dataset.z_min, dataset.z_max)
        results[mode] = res
        ref = renders["reference"] if mode != "reference" else None
        row = evalio.score_view(mode, view, renders[mode], grid, dataset.z_min, dataset.z_max,
                                reference=ref, band_px=band_px, masks=masks,
                                runtime_s=None if res is None else res.wall_s,
                                peak_bytes=None if res is None else res.peak_bytes)
        report.add(row)
        log.info("%s: psnr %.2f ssim %.3f band/interior %.2f", mode, row.psnr_abs, row.ssim_abs,
                 row.band_ratio)
    report.save(out / "report.csv")
    write_band_profile(out / "band_profile.csv", view, grid, renders, dataset)
    write_loss_curves(out / "loss_curves.csv", {m: out / m / "log.jsonl" for m in renders
                                               if (out / m / "log.jsonl").exists()})
    return Comparison(report, renders, results, masks)


def band_profile(view, grid, depth, gt_depth, inside, z_min, z_max, max_px: int = 24):
    """Depth MAE binned by pixel distance to the nearest interior tile edge."""
    inner, _ = evalio.edge_distance_px(view, grid, 0.5 * (z_min + z_max))
    err = np.abs(np.asarray(depth, np.float64) - gt_depth)
    rows = []
    for k in range(max_px):
        m = inside & (inner >= k) & (inner < k + 1)
        if m.any():
            rows.append((k, float(err[m].mean()), int(m.sum())))
    return rows


def write_band_profile(path, view, grid, renders: dict, dataset) -> None:
    inside = evalio.roi_mask(view, dataset.roi, dataset.z_min, dataset.z_max)
    gt = view.load_depth()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "distance_px", "mae", "pixels"])
        for mode, r in renders.items():
            for k, mae, n in band_profile(view, grid, r.depth, gt, inside, dataset.z_min,
                                          dataset.z_max):
                w.writerow([mode, k, f"{mae:.6g}", n])


def write_loss_curves(path, logs: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "iteration", "loss", "t_ms", "bytes"])
        for mode, p in logs.items():
            for rec in trainer.read_log(p):
                w.writerow([mode, rec["iteration"], f"{rec['loss']:.6g}", f"{rec['t_ms']:.3f}",
                            rec["bytes"]])


# -- scaling series ---------------------------------------------------------------------

def fit_line(x, y) -> dict:
    """Least-squares line with its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return dict(slope=float(slope), intercept=float(intercept), r2=float(r2))


def all_resident_bytes(grid_shape, field_cfg, dataset: dataio.Dataset) -> int:
    """Bytes if every tile field and every training image were resident."""
    from .field import GlobalColorNet, TileField
    f = TileField((0, 0), field_cfg).nbytes()
    c = GlobalColorNet(field_cfg).nbytes()
    per_tile = f["params"] + f["moments"] + f["occupancy"]
    return (grid_shape[0] * grid_shape[1] * per_tile + c["params"] + c["moments"]
            + dataset.nbytes_images())


def scaling_series(grids, out_dir, cfg: trainer.TrainConfig, tile_side: float = 16.0,
                   scene_kwargs=None, seed: int = 0) -> list:
    """Scaled runs over square grids whose ROI grows with the grid, so every
    tile holds the same amount of scene and imagery."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for g in grids:
        ext = g * tile_side
        spec = synth.random_scene(extent_e=ext, extent_n=ext, seed=seed, **(scene_kwargs or {}))
        ds_dir = out / f"data_{g}x{g}"
        if not (ds_dir / "manifest.json").exists():
            synth.generate(spec, ds_dir, seed=seed)
        ds = dataio.Dataset(ds_dir)
        run_cfg = replace(cfg, mode="scaled", grid=(g, g))
        crop_dir = out / f"crops_{g}x{g}"
        if not (crop_dir / "index.json").exists():
            dataio.build_crop_cache(ds, build_grid(ds.roi, g, g), crop_dir, cfg.margin_px)
        t0 = time.perf_counter()
        res = trainer.train(ds, run_cfg, out / f"run_{g}x{g}", crop_dir=crop_dir)
        wall = time.perf_counter() - t0
        rows.append(dict(grid=g, positions=len(TrainPlan.build(g, g, 1).positions), wall_s=wall,
                         peak_bytes=res.peak_bytes, dataset_bytes=ds.nbytes_images(),
                         all_resident_bytes=all_resident_bytes((g, g), cfg.field, ds)))
        log.info("scaling %dx%d: %.1fs, peak %.1f MB", g, g, wall, res.peak_bytes / 1e6)
    (out / "scaling.json").write_text(json.dumps(rows, indent=2))
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows
