import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilenerf.geometry import Ray, check_non_overlapping, segment_ray
from tilenerf.tiler import Roi, TileGrid, build_grid


def test_single_tile_is_roi():
    roi = Roi(0, 1, 0, 1, 0, 1)
    g = build_grid(roi, 1, 1)
    box = g.tile(0, 0).box
    np.testing.assert_array_equal(box.min_corner, [0, 0, 0])
    np.testing.assert_array_equal(box.max_corner, [1, 1, 1])


def test_tile_arithmetic():
    roi = Roi(500_000.0, 504_000.0, 4_000_000.0, 4_004_000.0, -10.0, 30.0)
    g = build_grid(roi, 4, 4)
    assert len(g.tiles) == 16
    box = g.tile(2, 3).box
    np.testing.assert_array_equal(box.min_corner, [503_000.0, 4_002_000.0, -10.0])
    np.testing.assert_array_equal(box.extent, [1000.0, 1000.0, 40.0])


def test_rejects_empty_grid():
    with pytest.raises(ValueError):
        build_grid(Roi(0, 1, 0, 1, 0, 1), 0, 2)
    with pytest.raises(ValueError):
        Roi(0, 1, 0, 1, 2, 1)


def test_rasterized_union_is_exact_partition():
    roi = Roi(0, 37, 0, 23, 0, 5)
    g = build_grid(roi, 3, 4)
    check_non_overlapping([t.box for t in g.tiles])
    x, y = np.meshgrid(np.arange(0.5, 37), np.arange(0.5, 23), indexing="ij")
    owners = np.zeros(x.shape, dtype=int)
    for t in g.tiles:
        owners += ((x >= t.box.min_corner[0]) & (x < t.box.max_corner[0])
                   & (y >= t.box.min_corner[1]) & (y < t.box.max_corner[1]))
    assert np.all(owners == 1)


@given(st.integers(1, 9), st.integers(1, 9), st.floats(-1e6, 1e6), st.floats(1.0, 1e4))
@settings(max_examples=100, deadline=None)
def test_shared_edges_bit_identical(h, w, lo, ext):
    g = build_grid(Roi(lo, lo + ext, lo, lo + 0.7 * ext, 0, 1), h, w)
    for r in range(h):
        for c in range(w):
            b = g.tile(r, c).box
            if c + 1 < w:
                assert b.max_corner[0] == g.tile(r, c + 1).box.min_corner[0]
            if r + 1 < h:
                assert b.max_corner[1] == g.tile(r + 1, c).box.min_corner[1]
    assert g.tile(h - 1, w - 1).box.max_corner[0] == lo + ext


def test_local_frame():
    t = build_grid(Roi(10, 30, -5, 15, 2, 6), 2, 2).tile(1, 0)
    np.testing.assert_array_equal(t.to_local(t.box.min_corner), [0, 0, 0])
    np.testing.assert_array_equal(t.to_local(t.box.max_corner), [1, 1, 1])
    np.testing.assert_allclose(t.to_local(t.box.center), [0.5, 0.5, 0.5])
    p = np.random.default_rng(0).uniform(-50, 50, (100, 3))
    np.testing.assert_allclose(t.from_local(t.to_local(p)), p, atol=1e-7)


def test_ray_to_local_keeps_metric_t():
    t = build_grid(Roi(0, 40, 0, 40, 0, 8), 2, 2).tile(0, 1)
    o = np.array([[25.0, 5.0, 8.0]])
    d = np.array([[0.3, 0.2, -0.9]])
    d /= np.linalg.norm(d)
    ol, dl, factor = t.ray_to_local(o, d)
    assert np.linalg.norm(dl) == pytest.approx(1.0)
    tm = 4.0
    np.testing.assert_allclose(ol + (tm * factor)[:, None] * dl, t.to_local(o + tm * d))


def test_locate():
    g = build_grid(Roi(0, 4, 0, 4, 0, 1), 2, 2)
    r, c = g.locate(np.array([0.5, 3.5, 4.0, -1.0]), np.array([3.5, 0.5, 4.0, 1.0]))
    assert list(zip(r, c)) == [(1, 0), (0, 1), (1, 1), (-1, -1)]


def test_grid_serialization():
    g = build_grid(Roi(0, 30, 0, 20, -1, 3), 3, 2)
    back = TileGrid.from_dict(g.to_dict())
    assert back.shape == g.shape
    np.testing.assert_array_equal(back.easting_edges, g.easting_edges)


def test_shadow_restricted_segmentation_matches_full(rng):
    """Segments computed against every tile equal those computed against the
    tiles the ray's footprint crosses."""
    g = build_grid(Roi(0, 64, 0, 64, -1, 7), 4, 4)
    all_tiles = [(t.id, t.box) for t in g.tiles]
    for _ in range(200):
        o = np.array([rng.uniform(0, 64), rng.uniform(0, 64), 7.0])
        d = np.array([rng.normal(0, 0.4), rng.normal(0, 0.4), -1.0])
        d /= np.linalg.norm(d)
        ray = Ray(o, d)
        t_bot = (-1 - 7) / d[2]
        bottom = o + t_bot * d
        xs = np.linspace(o[0], bottom[0], 200)
        ys = np.linspace(o[1], bottom[1], 200)
        rr, cc = g.locate(xs, ys)
        crossed = {(int(r), int(c)) for r, c in zip(rr, cc) if r >= 0}
        # include neighbours so corner clips are not missed by the coarse walk
        near = {(r + a, c + b) for r, c in crossed for a in (-1, 0, 1) for b in (-1, 0, 1)}
        subset = [(tid, box) for tid, box in all_tiles if tid in near]
        assert segment_ray(ray, all_tiles) == segment_ray(ray, subset)
