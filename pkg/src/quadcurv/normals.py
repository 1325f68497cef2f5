"""Initial surface normals from a small-window linear regression of z on (x, y)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from quadcurv.core import (
    MIN_SAMPLES,
    NormalField,
    Patch,
    PatchSampler,
    PatchSpec,
    PointMap,
    chunked_map,
    orient_toward_camera,
    patch_arrays,
)

#: Dense 7x7 window used for the initial normals.
INITIAL_SPEC = PatchSpec(window=7, stride=1)

#: ``det(M) <= DEGENERACY * trace(M)**2`` marks a degenerate (near collinear) patch.
DEGENERACY = 1e-9


@dataclass(frozen=True)
class PlaneFit:
    a: float
    b: float
    mean: np.ndarray
    condition_ok: bool


def _plane_fit_batch(rel: np.ndarray, mask: np.ndarray):
    """Regress z on (x, y) for every patch of a batch.

    Returns slopes ``a, b``, centroids (in the frame of ``rel``) and the
    conditioning flag.
    """
    w = mask.astype(np.float64)
    n = w.sum(axis=1)
    safe_n = np.maximum(n, 1.0)
    mean = np.einsum("ns,nsi->ni", w, rel) / safe_n[:, None]
    d = (rel - mean[:, None, :]) * w[..., None]
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    mxx = np.einsum("ns,ns->n", dx, dx)
    mxy = np.einsum("ns,ns->n", dx, dy)
    myy = np.einsum("ns,ns->n", dy, dy)
    vx = np.einsum("ns,ns->n", dx, dz)
    vy = np.einsum("ns,ns->n", dy, dz)
    det = mxx * myy - mxy * mxy
    trace = mxx + myy
    ok = (n >= 3) & (det > DEGENERACY * trace**2)
    safe_det = np.where(ok, det, 1.0)
    a = np.where(ok, (myy * vx - mxy * vy) / safe_det, 0.0)
    b = np.where(ok, (mxx * vy - mxy * vx) / safe_det, 0.0)
    return a, b, mean, ok


def fit_plane(patch: Patch) -> PlaneFit | None:
    """Least-squares plane ``z = a x + b y + c`` through a patch (centre included).

    Returns ``None`` for patches with fewer than three points.
    """
    if patch.count + 1 < 3:
        return None
    rel, mask = patch_arrays(patch)
    a, b, mean, ok = _plane_fit_batch(rel, mask)
    return PlaneFit(a=float(a[0]), b=float(b[0]), mean=patch.center + mean[0], condition_ok=bool(ok[0]))


def _normals_from_slopes(a: np.ndarray, b: np.ndarray, points: np.ndarray) -> np.ndarray:
    n = np.stack([-a, -b, np.ones_like(a)], axis=-1)
    n /= np.sqrt(1.0 + a * a + b * b)[..., None]
    return orient_toward_camera(n, points)


def normal_from_fit(fit: PlaneFit, point: np.ndarray | None = None) -> np.ndarray | None:
    """Unit normal ``(-a, -b, 1) / sqrt(1 + a^2 + b^2)`` turned to face the camera.

    ``point`` is the camera-frame point the normal belongs to; it defaults to
    the patch centroid.  Degenerate fits give ``None``.
    """
    if not fit.condition_ok:
        return None
    p = fit.mean if point is None else np.asarray(point, dtype=np.float64)
    return _normals_from_slopes(np.array(fit.a), np.array(fit.b), p)


def initial_normal_field(pm: PointMap, spec: PatchSpec = INITIAL_SPEC, threads: int = 1) -> NormalField:
    """Dense camera-facing normals from a regression over each pixel's window."""
    rows, cols = np.nonzero(pm.valid)
    normals = np.zeros(pm.shape + (3,))
    valid = np.zeros(pm.shape, dtype=bool)
    if rows.size == 0:
        return NormalField(normals, valid)
    sampler = PatchSampler(pm, spec)

    def work(idx):
        centers, rel, mask = sampler.gather(rows[idx], cols[idx])
        a, b, _, ok = _plane_fit_batch(rel, mask)
        ok &= mask.sum(axis=1) - 1 >= MIN_SAMPLES
        n = _normals_from_slopes(a, b, centers)
        ok &= np.einsum("ni,ni->n", n, centers) < 0
        return n, ok

    results = chunked_map(work, np.arange(rows.size), threads=threads)
    n = np.concatenate([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    normals[rows, cols] = n
    valid[rows, cols] = ok
    return NormalField(normals, valid)
