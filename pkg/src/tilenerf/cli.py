"""Command-line entry point: ``tilenerf {synth,tile,train,render,eval,compare}``.

A JSON run config may carry ``scene``, ``train``, ``eval`` and ``dataset``
sections; command-line flags override it.  Relative dataset paths resolve
against ``$TILENERF_DATA`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio, evalio, experiments, synth, trainer
from .field import FieldConfig
from .rendering import SamplingPolicy
from .tiler import build_grid

log = logging.getLogger("tilenerf")

DATA_ENV = "TILENERF_DATA"


def parse_grid(text: str) -> tuple:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def data_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(DATA_ENV)
    if root and not p.is_absolute() and not p.exists():
        return Path(root) / p
    return p


def load_config(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def train_config(conf: dict, args) -> trainer.TrainConfig:
    d = dict(conf.get("train", {}))
    if isinstance(d.get("field"), dict):
        d["field"] = FieldConfig(**d["field"])
    if isinstance(d.get("sampling"), dict):
        d["sampling"] = SamplingPolicy(**d["sampling"])
    for flag, key in (("mode", "mode"), ("grid", "grid"), ("n_it", "n_it"),
                      ("batch_size", "batch_size"), ("seed", "seed"), ("margin_px", "margin_px")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    return trainer.TrainConfig(**d)


def _dataset(conf, args) -> dataio.Dataset:
    path = getattr(args, "dataset", None) or conf.get("dataset")
    if path is None:
        raise SystemExit("no dataset given (positional argument or 'dataset' in the config)")
    return dataio.Dataset(data_path(path))


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args, conf) -> int:
    scene = dict(conf.get("scene", {}))
    seed = args.seed if args.seed is not None else scene.pop("seed", 0)
    scene.pop("seed", None)
    spec = synth.random_scene(seed=seed, **scene)
    out = Path(args.out or "dataset")
    m = synth.generate(spec, out, seed=seed, workers=args.workers)
    print(f"{len(m['views'])} views, {len(spec.buildings)} buildings -> {out}")
    return 0


def cmd_tile(args, conf) -> int:
    ds = _dataset(conf, args)
    grid = build_grid(ds.roi, *(args.grid or tuple(conf.get("train", {}).get("grid", (2, 2)))))
    margin = args.margin_px if args.margin_px is not None else \
        conf.get("train", {}).get("margin_px", 4)
    out = Path(args.out or ds.root / f"crops_{grid.rows}x{grid.cols}")
    index = dataio.build_crop_cache(ds, grid, out, margin, workers=args.workers)
    print(f"{len(index['crops'])} crops, {index['total_bytes']} bytes -> {out}")
    return 0


def cmd_train(args, conf) -> int:
    ds = _dataset(conf, args)
    cfg = train_config(conf, args)
    out = Path(args.out or f"run_{cfg.mode}")
    res = trainer.train(ds, cfg, out, crop_dir=args.crops, stop_after=args.stop_after)
    print(f"{res.mode}: {res.iterations} iterations in {res.wall_s:.1f}s, "
          f"peak {res.peak_bytes} bytes, final loss {res.final_loss:.5f} -> {out}")
    return 0


def cmd_render(args, conf) -> int:
    fs, manifest = trainer.load_run(args.run)
    ds = dataio.Dataset(data_path(args.dataset or manifest["dataset"]))
    out = Path(args.out or Path(args.run) / "renders")
    out.mkdir(parents=True, exist_ok=True)
    views = [ds.view(args.view)] if args.view is not None else ds.test_views
    for v in views:
        r = trainer.render_view(fs, v, ds.z_min, ds.z_max)
        img = np.round(np.clip(r.rgb, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"view_{v.id}.png")
        np.save(out / f"depth_{v.id}.npy", r.depth.astype(np.float32))
        np.save(out / f"opacity_{v.id}.npy", r.opacity.astype(np.float32))
        print(f"view {v.id} -> {out}")
    return 0


def cmd_eval(args, conf) -> int:
    ev = conf.get("eval", {})
    band = args.band_px if args.band_px is not None else ev.get("band_px", 8.0)
    report = evalio.EvalReport()
    ref_fs = trainer.load_run(args.reference)[0] if args.reference else None
    for run in args.runs:
        fs, manifest = trainer.load_run(run)
        ds = dataio.Dataset(data_path(args.dataset or manifest["dataset"]))
        grid = build_grid(ds.roi, *manifest["config"]["grid"])
        for v in ds.test_views:
            r = trainer.render_view(fs, v, ds.z_min, ds.z_max)
            ref = trainer.render_view(ref_fs, v, ds.z_min, ds.z_max) if ref_fs else None
            report.add(evalio.score_view(manifest["config"]["mode"], v, r, grid, ds.z_min,
                                         ds.z_max, reference=ref, band_px=band))
    out = Path(args.out or "report.csv")
    report.save(out)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_compare(args, conf) -> int:
    ds = _dataset(conf, args)
    cfg = train_config(conf, args)
    band = conf.get("eval", {}).get("band_px", 8.0)
    out = Path(args.out or "compare")
    cmp = experiments.compare_modes(ds, cfg, out, band_px=band)
    sys.stdout.write(cmp.report.to_csv())
    grids = conf.get("scaling", {}).get("grids")
    if grids:
        # the series sizes its own ROI and seeds its own scenes
        scene = {k: v for k, v in conf.get("scene", {}).items()
                 if k not in ("extent_e", "extent_n", "seed")}
        experiments.scaling_series(grids, out / "scaling", replace(cfg, mode="scaled"),
                                   tile_side=conf["scaling"].get("tile_side", 16.0),
                                   scene_kwargs=scene, seed=cfg.seed)
    dataio.write_run_manifest(out / "compare.json", config=conf, train=cfg.to_dict(),
                              dataset=str(ds.root))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1, help="thread cap for parallel steps")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--grid", type=parse_grid, help="tile grid as HxW")
    training.add_argument("--mode", choices=trainer.MODES)
    training.add_argument("--n-it", type=int, dest="n_it")
    training.add_argument("--batch-size", type=int, dest="batch_size")
    training.add_argument("--margin-px", type=int, dest="margin_px")

    p = argparse.ArgumentParser(prog="tilenerf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s = sub.add_parser("tile", parents=[common, training], help="build the crop cache")
    s.add_argument("dataset", nargs="?")
    s = sub.add_parser("train", parents=[common, training], help="train one mode")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--crops", help="existing crop cache directory")
    s.add_argument("--stop-after", type=int, dest="stop_after",
                   help="checkpoint and stop after this many window positions")
    s = sub.add_parser("render", parents=[common], help="render views of a trained run")
    s.add_argument("run")
    s.add_argument("--dataset")
    s.add_argument("--view", type=int)
    s = sub.add_parser("eval", parents=[common], help="score runs on the held-out views")
    s.add_argument("runs", nargs="+")
    s.add_argument("--dataset")
    s.add_argument("--reference", help="reference-mode run for the relative columns")
    s.add_argument("--band-px", type=float, dest="band_px")
    s = sub.add_parser("compare", parents=[common, training],
                       help="reference, unscaled and scaled back to back")
    s.add_argument("dataset", nargs="?")
    return p


COMMANDS = dict(synth=cmd_synth, tile=cmd_tile, train=cmd_train, render=cmd_render,
                eval=cmd_eval, compare=cmd_compare)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args, load_config(args.config))
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
