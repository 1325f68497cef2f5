import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from quadcurv import core, normals, synth
from quadcurv.core import Patch


def _patch(points: np.ndarray) -> Patch:
    """Patch whose centre is ``points[0]``."""
    c = points[0]
    return Patch(center=c, rel_points=points[1:] - c)


def _grid(n=7, spacing=1.0):
    g = (np.arange(n) - n // 2) * spacing
    x, y = np.meshgrid(g, g)
    x, y = x.ravel(), y.ravel()
    order = np.argsort(np.hypot(x, y), kind="stable")  # put the centre first
    return x[order], y[order]


def test_fit_plane_exact_linear():
    x, y = _grid()
    fit = normals.fit_plane(_patch(np.stack([x, y, 500 + 2 * x + 3 * y], axis=1)))
    assert fit.condition_ok
    assert np.isclose(fit.a, 2.0, atol=1e-12) and np.isclose(fit.b, 3.0, atol=1e-12)


def test_fit_plane_constant():
    x, y = _grid()
    fit = normals.fit_plane(_patch(np.stack([x, y, np.full_like(x, 700.0)], axis=1)))
    assert abs(fit.a) < 1e-15 and abs(fit.b) < 1e-15


def test_fit_plane_matches_lstsq_oracle():
    rng = np.random.default_rng(3)
    x, y = _grid()
    z = 900 + 0.4 * x - 0.7 * y + rng.normal(0, 1.0, x.size)
    fit = normals.fit_plane(_patch(np.stack([x, y, z], axis=1)))
    X = np.stack([x, y, np.ones_like(x)], axis=1)
    (a, b, _), *_ = np.linalg.lstsq(X, z, rcond=None)
    assert abs(fit.a - a) < 1e-12 and abs(fit.b - b) < 1e-12


def test_fit_plane_collinear_is_degenerate():
    x = np.arange(9, dtype=float)
    fit = normals.fit_plane(_patch(np.stack([x, 2 * x, 500 + x], axis=1)))
    assert not fit.condition_ok
    assert normals.normal_from_fit(fit) is None


def test_normal_from_fit_examples():
    up = normals.PlaneFit(0.0, 0.0, np.array([0.0, 0.0, 0.0]), True)
    assert np.allclose(normals.normal_from_fit(up, np.array([0.0, 0.0, -1.0])), [0, 0, 1])
    assert np.allclose(normals.normal_from_fit(up, np.array([0.0, 0.0, 1000.0])), [0, 0, -1])
    tilted = normals.PlaneFit(1.0, 0.0, np.zeros(3), True)
    assert np.allclose(normals.normal_from_fit(tilted, np.array([0.0, 0.0, -1.0])), np.array([-1, 0, 1]) / np.sqrt(2))


def test_initial_field_all_invalid(k):
    pm = core.backproject(core.RangeImage(np.zeros(k.shape)), k)
    nf = normals.initial_normal_field(pm)
    assert not nf.valid.any()


def test_initial_field_sphere(sphere_frame, k):
    img, gt = sphere_frame
    nf = normals.initial_normal_field(core.backproject(img, k))
    m = nf.valid & ~gt.edge_mask & (gt.label > 0)
    err = np.degrees(core.angle_between(nf.normals[m], gt.normal[m]))
    assert err.mean() < 0.5


def test_initial_field_tilted_plane(k):
    R = Rotation.from_euler("y", 30, degrees=True).as_matrix()
    plane = synth.ShapeSpec(kind="plane", rotation=R, translation=np.array([0.0, 0.0, 1000.0]))
    n = -R[:, 2]  # local +z turned to face the camera
    img, gt = synth.render([plane], k)
    pm = core.backproject(img, k)
    nf = normals.initial_normal_field(pm)
    m = nf.valid & ~gt.edge_mask
    assert m.sum() > 0.9 * k.width * k.height
    err = np.degrees(core.angle_between(nf.normals[m], n))
    assert err.max() < 0.1
    # unit length and camera facing
    assert np.allclose(np.linalg.norm(nf.normals[nf.valid], axis=1), 1, atol=1e-6)
    assert np.all(np.einsum("ni,ni->n", nf.normals[nf.valid], pm.points[nf.valid]) < 0)


def _rand_patch(seed):
    rng = np.random.default_rng(seed)
    x, y = _grid(7, 2.0)
    a, b = rng.uniform(-2, 2, 2)
    z = 800 + a * x + b * y + rng.normal(0, 0.5, x.size)
    return np.stack([x, y, z], axis=1)


@given(st.integers(0, 10_000), st.floats(0, 2 * np.pi))
def test_rotation_equivariance_about_z(seed, phi):
    pts = _rand_patch(seed)
    c, s = np.cos(phi), np.sin(phi)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    f0 = normals.fit_plane(_patch(pts))
    f1 = normals.fit_plane(_patch(pts @ Rz.T))
    assume(f0.condition_ok and f1.condition_ok)
    probe = np.array([0.0, 0.0, -1.0])
    n0 = normals.normal_from_fit(f0, probe)
    n1 = normals.normal_from_fit(f1, probe)
    assert np.allclose(Rz @ n0, n1, atol=1e-9)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, s):
    pts = _rand_patch(seed)
    f0 = normals.fit_plane(_patch(pts))
    f1 = normals.fit_plane(_patch(pts * s))
    assert np.isclose(f0.a, f1.a, rtol=1e-9, atol=1e-12)
    assert np.isclose(f0.b, f1.b, rtol=1e-9, atol=1e-12)
