import csv
import json
import time

import numpy as np
import pytest
from PIL import Image

from tilenerf import cli, dataio

SCENE = dict(extent_e=24.0, extent_n=24.0, n_train_views=3, seed=4)
FIELD = dict(n_levels=4, log2_table_size=10, base_resolution=4, max_resolution=16,
             density_hidden=16, color_hidden=16, occupancy_resolution=8)


def write_config(path, **train):
    conf = dict(scene=SCENE, train=dict(field=FIELD, batch_size=128, n_it=4, **train),
                eval=dict(band_px=4))
    path.write_text(json.dumps(conf))
    return str(path)


def test_parse_grid():
    assert cli.parse_grid("3x4") == (3, 4)
    with pytest.raises(Exception):
        cli.parse_grid("3by4")
    with pytest.raises(Exception):
        cli.parse_grid("0x2")


def test_end_to_end(tmp_path, capsys):
    t0 = time.perf_counter()
    conf = write_config(tmp_path / "conf.json")
    ds = tmp_path / "ds"
    assert cli.main(["synth", "--config", conf, "--out", str(ds)]) == 0
    assert cli.main(["tile", str(ds), "--grid", "2x2", "--out", str(tmp_path / "crops")]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", str(ds), "--config", conf, "--mode", "scaled", "--grid", "2x2",
                     "--crops", str(tmp_path / "crops"), "--out", str(run)]) == 0
    manifest = dataio.read_run_manifest(run / "run.json")
    assert manifest["config"]["grid"] == [2, 2]
    assert manifest["config"]["field"]["log2_table_size"] == 10
    assert cli.main(["render", str(run), "--out", str(tmp_path / "renders")]) == 0
    held = dataio.Dataset(ds).test_views[0]
    png = Image.open(tmp_path / "renders" / f"view_{held.id}.png")
    assert png.size == (held.shape[1], held.shape[0])
    report = tmp_path / "report.csv"
    capsys.readouterr()
    assert cli.main(["eval", str(run), "--config", conf, "--reference", str(run),
                     "--out", str(report)]) == 0
    rows = list(csv.DictReader(report.open()))
    assert len(rows) == 1 and rows[0]["method"] == "scaled"
    assert float(rows[0]["psnr_rel"]) == 99.0
    assert capsys.readouterr().out.startswith("method,")
    # the same manifest gives the same report
    run2 = tmp_path / "run2"
    assert cli.main(["train", str(ds), "--config", conf, "--mode", "scaled", "--grid", "2x2",
                     "--crops", str(tmp_path / "crops"), "--out", str(run2)]) == 0
    assert cli.main(["eval", str(run2), "--config", conf, "--reference", str(run),
                     "--out", str(tmp_path / "report2.csv")]) == 0
    assert (tmp_path / "report2.csv").read_text() == report.read_text()
    assert time.perf_counter() - t0 < 600


def test_empty_field_renders_background(tmp_path):
    conf = json.loads(open(write_config(tmp_path / "c.json")).read())
    conf["train"]["field"]["density_bias"] = -40.0
    conf["train"]["background"] = [0.25, 0.5, 0.75]
    (tmp_path / "c.json").write_text(json.dumps(conf))
    ds = tmp_path / "ds"
    assert cli.main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(ds)]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", str(ds), "--config", str(tmp_path / "c.json"), "--grid", "1x1",
                     "--mode", "unscaled", "--out", str(run)]) == 0
    assert cli.main(["render", str(run), "--out", str(tmp_path / "r")]) == 0
    view = dataio.Dataset(ds).test_views[0]
    img = np.asarray(Image.open(tmp_path / "r" / f"view_{view.id}.png"))
    assert np.all(img == np.round(np.array([0.25, 0.5, 0.75]) * 255).astype(np.uint8))
    assert np.all(np.load(tmp_path / "r" / f"opacity_{view.id}.npy") < 1e-6)


def test_compare_rows(tmp_path, capsys):
    conf = write_config(tmp_path / "c.json")
    ds = tmp_path / "ds"
    cli.main(["synth", "--config", conf, "--out", str(ds)])
    capsys.readouterr()
    assert cli.main(["compare", str(ds), "--config", conf, "--grid", "2x2", "--n-it", "2",
                     "--out", str(tmp_path / "cmp")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "cmp" / "report.csv")))
    assert [r["method"] for r in rows] == ["reference", "unscaled", "scaled"]
    assert rows[0]["psnr_rel"] == "" and rows[2]["psnr_rel"] != ""
    for name in ("band_profile.csv", "loss_curves.csv", "compare.json"):
        assert (tmp_path / "cmp" / name).exists()


def test_compare_with_scaling(tmp_path, capsys):
    conf = json.loads(open(write_config(tmp_path / "c.json")).read())
    conf["scaling"] = dict(grids=[2], tile_side=8.0)
    (tmp_path / "c.json").write_text(json.dumps(conf))
    ds = tmp_path / "ds"
    cli.main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(ds)])
    assert cli.main(["compare", str(ds), "--config", str(tmp_path / "c.json"), "--grid", "2x2",
                     "--n-it", "1", "--out", str(tmp_path / "cmp")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "cmp" / "scaling" / "scaling.csv")))
    assert [int(r["grid"]) for r in rows] == [2]


def test_errors_exit_nonzero(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path / "missing")]) == 1
    assert "error" in capsys.readouterr().err


def test_data_root_env(tmp_path, monkeypatch):
    (tmp_path / "sets" / "a").mkdir(parents=True)
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path / "sets"))
    assert cli.data_path("a") == tmp_path / "sets" / "a"
