import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadcurv import core, normals


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        core.Intrinsics(0, 500, 320, 240, 640, 480)
    with pytest.raises(ValueError):
        core.Intrinsics(500, 500, 640, 240, 640, 480)
    with pytest.raises(ValueError):
        core.Intrinsics(500, 500, 320, 0, 640, 480)


def test_range_image_masks_bad_depth():
    d = np.array([[1.0, 0.0], [np.nan, -3.0]])
    img = core.RangeImage(d)
    assert img.valid.tolist() == [[True, False], [False, False]]
    assert img.depth[1, 0] == 0.0


def test_fields_are_read_only():
    img = core.RangeImage(np.ones((2, 2)))
    with pytest.raises(ValueError):
        img.depth[0, 0] = 5.0


def test_backproject_principal_point():
    k = core.Intrinsics(500, 500, 320, 240, 640, 480)
    d = np.zeros(k.shape)
    d[240, 320] = 1000.0
    pm = core.backproject(core.RangeImage(d), k)
    assert np.array_equal(pm.points[240, 320], [0.0, 0.0, 1000.0])
    assert pm.valid.sum() == 1


def test_backproject_offset_pixel():
    k = core.Intrinsics(500, 500, 320, 240, 640, 480)
    d = np.zeros(k.shape)
    d[240, 420] = 1000.0
    pm = core.backproject(core.RangeImage(d), k)
    assert np.allclose(pm.points[240, 420], [200.0, 0.0, 1000.0], atol=0, rtol=1e-15)


def test_backproject_dimension_mismatch(k):
    with pytest.raises(ValueError):
        core.backproject(core.RangeImage(np.ones((10, 10))), k)


def test_backproject_sphere_points_on_sphere(sphere_frame, k):
    img, _ = sphere_frame
    pm = core.backproject(img, k)
    center = np.array([0.0, 0.0, 800.0])
    r = np.linalg.norm(pm.points[pm.valid] - center, axis=1)
    assert np.abs(r - 100.0).max() < 1e-6


def test_project_backproject_roundtrip(sphere_frame, k):
    img, _ = sphere_frame
    pm = core.backproject(img, k)
    u, v, z = core.project(pm.points[pm.valid], k)
    rows, cols = np.nonzero(pm.valid)
    assert np.allclose(u, cols, rtol=1e-9, atol=0)
    assert np.allclose(v, rows, rtol=1e-9, atol=0)
    assert np.allclose(z, img.depth[pm.valid], rtol=1e-9, atol=0)


def _grid_pm(z_fn, shape=(20, 20), spacing=1.0):
    rows, cols = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    x, y = cols * spacing, rows * spacing
    pts = np.stack([x, y, z_fn(x, y)], axis=-1)
    return core.PointMap(pts, np.ones(shape, dtype=bool))


def test_patch_spec_counts():
    assert len(core.PatchSpec(3, 1).offsets()) == 9
    assert len(core.PatchSpec(37, 3).offsets()) == 169
    assert core.PatchSpec(37, 3).offsets()[core.PatchSpec(37, 3).center_index].tolist() == [0, 0]
    with pytest.raises(ValueError):
        core.PatchSpec(4, 1)
    with pytest.raises(ValueError):
        core.PatchSpec(7, 7)


def test_extract_patch_small_window():
    pm = _grid_pm(lambda x, y: 100 + 0 * x)
    p = core.extract_patch(pm, (5, 5), core.PatchSpec(3, 1))
    assert p.count == 8
    assert not np.any(np.all(p.rel_points == 0, axis=1))
    assert p.deficient  # 8 < 12
    assert core.extract_patch(pm, (5, 5), core.PatchSpec(3, 1), min_samples=8).deficient is False


def test_extract_patch_invalid_center():
    pm = _grid_pm(lambda x, y: 100 + 0 * x)
    valid = pm.valid.copy()
    valid[5, 5] = False
    pm = core.PointMap(pm.points, valid)
    assert core.extract_patch(pm, (5, 5), core.PatchSpec(3, 1)) is None
    assert core.extract_patch(pm, (50, 5), core.PatchSpec(3, 1)) is None


def test_extract_patch_default_spec_full_window():
    pm = _grid_pm(lambda x, y: 100 + 0 * x, shape=(60, 60))
    p = core.extract_patch(pm, (30, 30), core.PatchSpec())
    assert p.count == 168


def test_extract_patch_border_is_clipped():
    pm = _grid_pm(lambda x, y: 100 + 0 * x)
    p = core.extract_patch(pm, (0, 0), core.PatchSpec(5, 1))
    assert p.count == 8  # 3x3 quadrant minus centre


def test_extract_patch_planar_points_coplanar():
    pm = _grid_pm(lambda x, y: 500 + 0.3 * x - 0.2 * y)
    p = core.extract_patch(pm, (10, 10), core.PatchSpec(7, 1))
    fit = normals.fit_plane(p)
    n = np.array([-fit.a, -fit.b, 1.0])
    assert np.allclose(p.rel_points @ n, 0.0, atol=1e-9)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_extract_patch_translation_invariant(tx, ty, tz):
    pm = _grid_pm(lambda x, y: 500 + 0.01 * x * x)
    moved = core.PointMap(pm.points + np.array([tx, ty, tz]), pm.valid)
    a = core.extract_patch(pm, (10, 10), core.PatchSpec(7, 2))
    b = core.extract_patch(moved, (10, 10), core.PatchSpec(7, 2))
    assert np.allclose(a.rel_points, b.rel_points, atol=1e-9)


@given(st.integers(0, 19), st.integers(0, 19), st.sampled_from([(3, 1), (5, 2), (9, 3), (7, 1)]))
def test_extract_patch_stays_in_window(r, c, ws):
    spec = core.PatchSpec(*ws)
    pm = _grid_pm(lambda x, y: 100 + 0 * x)
    p = core.extract_patch(pm, (r, c), spec)
    # rel x/y are column/row offsets on this unit grid
    assert np.all(np.abs(p.rel_points[:, :2]) <= spec.half)
    assert np.all(np.abs(p.rel_points[:, :2]) % spec.stride == 0)


def test_chunked_map_independent_of_threads():
    idx = np.arange(10000)
    one = core.chunked_map(lambda c: c * 2, idx, threads=1)
    four = core.chunked_map(lambda c: c * 2, idx, threads=4)
    assert [len(c) for c in one] == [len(c) for c in four]
    assert all(np.array_equal(a, b) for a, b in zip(one, four))


def test_angle_between():
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([np.cos(0.1), np.sin(0.1), 0.0])
    assert np.isclose(core.angle_between(a, b), 0.1, atol=1e-15)
