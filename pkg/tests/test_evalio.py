import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tilenerf import evalio, synth
from tilenerf.evalio import EvalReport, EvalRow, depth_mae, psnr, ssim
from tilenerf.rendering import RenderOutput
from tilenerf.tiler import build_grid


def naive_ssim(a, b, c1=1e-4, c2=9e-4):
    """Window-by-window SSIM with an explicit 2D Gaussian."""
    x = np.arange(11) - 5.0
    g = np.exp(-0.5 * (x / 1.5) ** 2)
    w = np.outer(g, g)
    w /= w.sum()
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestMetrics:
    def test_psnr_examples(self, rng):
        a = rng.random((8, 8, 3))
        assert psnr(a, a) == 99.0
        assert psnr(np.full((4, 4), 0.5), np.full((4, 4), 0.6)) == pytest.approx(20.0)
        b = rng.random((8, 8, 3))
        assert psnr(a, b) == psnr(b, a)
        with pytest.raises(ValueError):
            psnr(a, b[:4])

    def test_ssim_examples(self, rng):
        a = rng.random((24, 24, 3))
        assert ssim(a, a) == pytest.approx(1.0)
        binary = (rng.random((24, 24)) > 0.5).astype(float)
        assert ssim(binary, 1 - binary) < 0
        b = rng.random((24, 24, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        with pytest.raises(ValueError):
            ssim(a[:8, :8], b[:8, :8])

    def test_ssim_matches_naive(self, rng):
        a = rng.random((20, 23))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (14, 14), elements=st.floats(0, 1)),
           arrays(np.float64, (14, 14), elements=st.floats(0, 1)))
    def test_ssim_bounds(self, a, b):
        assert -1 - 1e-9 <= ssim(a, b) <= 1 + 1e-9

    def test_depth_mae(self, rng):
        d = rng.random((5, 5))
        assert depth_mae(d, d) == 0
        assert depth_mae(d, d + 1) == pytest.approx(1.0)
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0] = True
        assert depth_mae(d, d + np.arange(25).reshape(5, 5), mask) == 0
        with pytest.raises(ValueError):
            depth_mae(d, d, np.zeros((5, 5), dtype=bool))


class TestMasks:
    def test_nadir_band_follows_projected_edges(self, small_dataset):
        ds = small_dataset
        view = ds.test_views[0]
        grid = build_grid(ds.roi, 2, 2)
        inside = evalio.roi_mask(view, ds.roi, ds.z_min, ds.z_max)
        band, interior = evalio.band_masks(view, grid, ds.z_min, ds.z_max, 4, inside)
        assert not np.any(band & interior)
        assert band.any() and interior.any()
        # nadir: columns map to easting, rows to northing, gsd 0.5 m
        mid = 0.5 * (ds.z_min + ds.z_max)
        e_col = view.camera.project([[16.0, 16.0, mid]])[0]
        rows, cols = np.nonzero(band)
        dist = np.minimum(np.abs(rows + 0.5 - e_col[0]), np.abs(cols + 0.5 - e_col[1]))
        assert dist.max() <= 4.0 + 0.05
        rows, cols = np.nonzero(interior)
        dist = np.minimum(np.abs(rows + 0.5 - e_col[0]), np.abs(cols + 0.5 - e_col[1]))
        assert dist.min() > 4.0 - 0.05

    def test_roi_mask_is_the_footprint(self, small_dataset):
        view = small_dataset.test_views[0]
        inside = evalio.roi_mask(view, small_dataset.roi, small_dataset.z_min, small_dataset.z_max)
        r0, r1, c0, c1 = evalio.roi_rect(inside)
        # 32 m at 0.5 m/px, minus nothing for a nadir view
        assert (r1 - r0, c1 - c0) == (pytest.approx(64, abs=1), pytest.approx(64, abs=1))

    def test_quadrant_labels(self, small_dataset):
        ds = small_dataset
        lab = evalio.view_quadrant_labels(ds.test_views[0], build_grid(ds.roi, 2, 2),
                                          ds.z_min, ds.z_max)
        assert set(np.unique(lab)) == {-1, 0, 1, 2, 3}


def test_crop_overlap_matches_parallax(small_dataset):
    """Overlap of east-west neighbours' crops from a closed-form orthographic model."""
    ds = small_dataset
    grid = build_grid(ds.roi, 4, 4)
    margin = 4
    for view in ds.train_views:
        left = view.camera.crop_for_tile(grid.tile(1, 1).box, margin)
        right = view.camera.crop_for_tile(grid.tile(1, 2).box, margin)
        overlap = left.pixel_rect[3] - right.pixel_rect[2]
        v = synth.view_direction(synth.ViewSpec(view.azimuth_deg, view.off_nadir_deg))
        norm = math.sqrt(1 - v[0] ** 2)
        side = grid.tile(1, 1).box.extent[1]
        gsd = ds.manifest["gsd"]
        expect = (abs(v[0] * v[1]) * side + abs(v[0] * v[2]) * (ds.z_max - ds.z_min)) / (norm * gsd)
        assert overlap == pytest.approx(expect + 2 * margin, abs=2.0)
        bound = 2 * (ds.z_max - ds.z_min) * math.tan(math.radians(view.off_nadir_deg)) / gsd
        assert 2 * margin <= overlap <= 2 * margin + bound + side * 0.25 / gsd + 2


def test_score_view_and_report(small_dataset, tmp_path):
    ds = small_dataset
    view = ds.test_views[0]
    grid = build_grid(ds.roi, 2, 2)
    gt = RenderOutput(view.load_image() / 255.0, view.load_depth(),
                      np.ones(view.shape))
    row = evalio.score_view("oracle", view, gt, grid, ds.z_min, ds.z_max, reference=gt)
    assert row.psnr_abs == 99.0 and row.mae_abs == 0 and row.coverage == 1.0
    assert row.psnr_rel == 99.0 and row.ssim_rel == pytest.approx(1.0)
    shifted = RenderOutput(gt.rgb, gt.depth + 1.0, gt.opacity)
    row2 = evalio.score_view("shift", view, shifted, grid, ds.z_min, ds.z_max)
    assert row2.mae_abs == pytest.approx(1.0) and row2.band_ratio == pytest.approx(1.0)
    rep = EvalReport()
    rep.add(row)
    rep.add(row2)
    rep.save(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].split(",") == list(evalio.REPORT_COLUMNS)
    assert lines[2].split(",")[3] == ""          # no reference for the second row
    assert rep.by_method("shift") is row2
    assert (tmp_path / "r.json").exists()


def test_band_ratio():
    row = EvalRow("x", 0, 20.0, 0.5, 1.0, band_mae=3.0, interior_mae=1.5, coverage=1.0)
    assert row.band_ratio == 2.0
