"""Comparison estimators.

* ``lsq_quadric``: one-shot least-squares fit of a quadratic height function in
  the tangent frame of the initial normal, curvature from the Weingarten map.
* ``reweighted_lsq``: the same fit repeated with robust weights ``k/(k + r^2)``.
* ``pca``: double differentiation by PCA, first of point differences (normals)
  and then of normal differences (curvature), over a metric radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from quadcurv.core import (
    MIN_SAMPLES,
    CurvatureField,
    Intrinsics,
    NormalField,
    Patch,
    PatchSampler,
    PatchSpec,
    PointMap,
    chunked_map,
    patch_arrays,
)
from quadcurv.quadric import rotation_to_z

METHODS = ("lsq_quadric", "reweighted_lsq", "pca")

#: Relative threshold on the R diagonal of the design-matrix QR below which
#: the fit is treated as rank deficient.
RANK_TOL = 1e-10


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "lsq_quadric"
    radius_mm: float = 10.0
    spec: PatchSpec = field(default_factory=PatchSpec)
    irls_iters: int = 5
    k_floor: float = 1e-6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}, got {self.method!r}")
        if self.method == "pca" and not self.radius_mm > 0:
            raise ValueError(f"radius_mm must be positive, got {self.radius_mm}")
        if self.irls_iters < 1:
            raise ValueError("irls_iters must be >= 1")


# --------------------------------------------------------------------------
# quadratic height-function fits


def _tangent_frame(rel: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Rotate centre-relative samples so the away-from-camera normal is +z."""
    rot = rotation_to_z(-np.asarray(normals, dtype=np.float64))
    return np.einsum("nij,nsj->nsi", rot, rel)


def _design(q: np.ndarray) -> np.ndarray:
    x, y = q[..., 0], q[..., 1]
    return np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=-1)


def _weighted_lsq(X: np.ndarray, z: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched weighted least squares by QR.  Returns ``(coef (N,6), ok)``."""
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[..., None])
    d = np.abs(np.diagonal(R, axis1=1, axis2=2))
    ok = d.min(axis=1) > RANK_TOL * np.maximum(d.max(axis=1), np.finfo(float).tiny)
    R = np.where(ok[:, None, None], R, np.eye(6))
    rhs = np.einsum("nsi,ns->ni", Q, z * sw)
    coef = np.linalg.solve(R, rhs[..., None])[..., 0]
    return np.where(ok[:, None], coef, 0.0), ok


def height_curvatures(coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal curvatures at the origin of ``z = a x^2 + b xy + c y^2 + d x + e y + f``.

    Eigenvalues of the Weingarten map ``I^-1 II``.
    """
    coef = np.asarray(coef, dtype=np.float64)
    a, b, c, d, e = (coef[..., i] for i in range(5))
    g = np.sqrt(1.0 + d * d + e * e)
    L, M, N = 2.0 * a / g, b / g, 2.0 * c / g
    E, F, G = 1.0 + d * d, d * e, 1.0 + e * e
    det1 = E * G - F * F
    H = (E * N - 2.0 * F * M + G * L) / (2.0 * det1)
    K = (L * N - M * M) / det1
    disc = np.sqrt(np.maximum(H * H - K, 0.0))
    return H + disc, H - disc


def _fit_heights(q: np.ndarray, mask: np.ndarray, w: np.ndarray):
    X = _design(q)
    coef, ok = _weighted_lsq(X, q[..., 2], w * mask)
    return coef, ok, X


def _besl_weights(resid: np.ndarray, mask: np.ndarray, k_floor: float) -> np.ndarray:
    n = np.maximum(mask.sum(axis=1), 1)
    k = np.maximum((resid**2 * mask).sum(axis=1) / n, k_floor)
    return k[:, None] / (k[:, None] + resid**2)


def _reweighted_batch(
    q: np.ndarray,
    mask: np.ndarray,
    iters: int,
    k_floor: float,
    weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
):
    w = np.ones(mask.shape)
    coef, ok, X = _fit_heights(q, mask, w)
    for _ in range(iters):
        resid = q[..., 2] - np.einsum("nsi,ni->ns", X, coef)
        w = _besl_weights(resid, mask, k_floor) if weight_fn is None else weight_fn(resid, mask)
        coef, ok2, _ = _fit_heights(q, mask, w)
        ok &= ok2
    return coef, ok


def _patch_frame(patch: Patch, init_normal) -> tuple[np.ndarray, np.ndarray] | None:
    if patch.count + 1 < 6:
        return None
    rel, mask = patch_arrays(patch)
    return _tangent_frame(rel, np.asarray(init_normal, dtype=np.float64)[None]), mask


def lsq_quadric_fit(patch: Patch, init_normal) -> tuple[float, float] | None:
    """Closed-form quadratic height fit; ``None`` if the design is rank deficient."""
    framed = _patch_frame(patch, init_normal)
    if framed is None:
        return None
    q, mask = framed
    coef, ok, _ = _fit_heights(q, mask, np.ones(mask.shape))
    if not ok[0]:
        return None
    k1, k2 = height_curvatures(coef[0])
    return float(k1), float(k2)


def reweighted_lsq_fit(
    patch: Patch,
    init_normal,
    cfg: BaselineConfig = BaselineConfig(method="reweighted_lsq"),
    weight_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> tuple[float, float] | None:
    """Robustly reweighted quadratic height fit.

    ``weight_fn(residuals, mask)`` overrides the default ``k/(k + r^2)``
    weights, where ``k`` is the mean squared residual of the previous fit.
    """
    framed = _patch_frame(patch, init_normal)
    if framed is None:
        return None
    q, mask = framed
    coef, ok = _reweighted_batch(q, mask, cfg.irls_iters, cfg.k_floor, weight_fn)
    if not ok[0]:
        return None
    k1, k2 = height_curvatures(coef[0])
    return float(k1), float(k2)


def quadric_baseline_field(
    pm: PointMap, nf: NormalField, cfg: BaselineConfig, threads: int = 1
) -> CurvatureField:
    """Dense ``lsq_quadric`` or ``reweighted_lsq`` curvature over valid pixels."""
    if cfg.method == "pca":
        raise ValueError("use pca_curvature for the pca method")
    rows, cols = np.nonzero(pm.valid & nf.valid)
    shape = pm.shape
    if rows.size == 0:
        return CurvatureField.empty(shape)
    sampler = PatchSampler(pm, cfg.spec)

    def work(idx):
        _, rel, mask = sampler.gather(rows[idx], cols[idx])
        q = _tangent_frame(rel, nf.normals[rows[idx], cols[idx]])
        if cfg.method == "lsq_quadric":
            coef, ok, _ = _fit_heights(q, mask, np.ones(mask.shape))
        else:
            coef, ok = _reweighted_batch(q, mask, cfg.irls_iters, cfg.k_floor)
        ok &= mask.sum(axis=1) - 1 >= MIN_SAMPLES
        k1, k2 = height_curvatures(coef)
        return k1, k2, ok, mask.sum(axis=1)

    parts = chunked_map(work, np.arange(rows.size), threads=threads)
    out = [np.zeros(shape) for _ in range(2)]
    valid = np.zeros(shape, dtype=bool)
    count = np.zeros(shape, dtype=np.int32)
    out[0][rows, cols] = np.concatenate([p[0] for p in parts])
    out[1][rows, cols] = np.concatenate([p[1] for p in parts])
    valid[rows, cols] = np.concatenate([p[2] for p in parts])
    count[rows, cols] = np.concatenate([p[3] for p in parts])
    return CurvatureField(out[0], out[1], valid, inlier_count=count)


# --------------------------------------------------------------------------
# PCA double differentiation


@njit(cache=True, nogil=True)
def _pca_normals_kernel(points, valid, rows, cols, fx, radius, min_count, normals, ok):
    H, W = valid.shape
    r2 = radius * radius
    for n in range(rows.size):
        r0, c0 = rows[n], cols[n]
        p = points[r0, c0]
        hw = int(math.ceil(radius * fx / p[2]))
        s = np.zeros(3)
        ss = np.zeros((3, 3))
        cnt = 0
        for r in range(max(r0 - hw, 0), min(r0 + hw + 1, H)):
            for c in range(max(c0 - hw, 0), min(c0 + hw + 1, W)):
                if not valid[r, c]:
                    continue
                d0 = points[r, c, 0] - p[0]
                d1 = points[r, c, 1] - p[1]
                d2 = points[r, c, 2] - p[2]
                if d0 * d0 + d1 * d1 + d2 * d2 > r2:
                    continue
                cnt += 1
                s[0] += d0
                s[1] += d1
                s[2] += d2
                ss[0, 0] += d0 * d0
                ss[0, 1] += d0 * d1
                ss[0, 2] += d0 * d2
                ss[1, 1] += d1 * d1
                ss[1, 2] += d1 * d2
                ss[2, 2] += d2 * d2
        if cnt < min_count:
            continue
        cov = np.empty((3, 3))
        for i in range(3):
            for j in range(i, 3):
                cov[i, j] = ss[i, j] / cnt - s[i] * s[j] / (cnt * cnt)
                cov[j, i] = cov[i, j]
        lam, vec = np.linalg.eigh(cov)
        if not (lam[1] > 0.0):
            continue
        nv = vec[:, 0]
        if nv[0] * p[0] + nv[1] * p[1] + nv[2] * p[2] >= 0.0:
            nv = -nv
        normals[n, 0], normals[n, 1], normals[n, 2] = nv[0], nv[1], nv[2]
        ok[n] = True


@njit(cache=True, nogil=True)
def _pca_curvature_kernel(points, normals, valid, rows, cols, fx, radius, min_count, k1, k2, ok):
    H, W = valid.shape
    r2 = radius * radius
    for n in range(rows.size):
        r0, c0 = rows[n], cols[n]
        p = points[r0, c0]
        nc = normals[r0, c0]
        # tangent basis (u, v) orthogonal to the centre normal
        if abs(nc[0]) < 0.9:
            a0, a1, a2 = 1.0, 0.0, 0.0
        else:
            a0, a1, a2 = 0.0, 1.0, 0.0
        dot = a0 * nc[0] + a1 * nc[1] + a2 * nc[2]
        u0, u1, u2 = a0 - dot * nc[0], a1 - dot * nc[1], a2 - dot * nc[2]
        un = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        u0, u1, u2 = u0 / un, u1 / un, u2 / un
        v0 = nc[1] * u2 - nc[2] * u1
        v1 = nc[2] * u0 - nc[0] * u2
        v2 = nc[0] * u1 - nc[1] * u0
        hw = int(math.ceil(radius * fx / p[2]))
        cnt = 0
        su = 0.0
        sv = 0.0
        suu = 0.0
        suv = 0.0
        svv = 0.0
        tsum = 0.0
        for r in range(max(r0 - hw, 0), min(r0 + hw + 1, H)):
            for c in range(max(c0 - hw, 0), min(c0 + hw + 1, W)):
                if not valid[r, c]:
                    continue
                d0 = points[r, c, 0] - p[0]
                d1 = points[r, c, 1] - p[1]
                d2 = points[r, c, 2] - p[2]
                if d0 * d0 + d1 * d1 + d2 * d2 > r2:
                    continue
                m = normals[r, c]
                pu = m[0] * u0 + m[1] * u1 + m[2] * u2
                pv = m[0] * v0 + m[1] * v1 + m[2] * v2
                xu = d0 * u0 + d1 * u1 + d2 * u2
                xv = d0 * v0 + d1 * v1 + d2 * v2
                cnt += 1
                su += pu
                sv += pv
                suu += pu * pu
                suv += pu * pv
                svv += pv * pv
                tsum += math.sqrt(xu * xu + xv * xv)
        if cnt < min_count:
            continue
        cuu = suu / cnt - su * su / (cnt * cnt)
        cuv = suv / cnt - su * sv / (cnt * cnt)
        cvv = svv / cnt - sv * sv / (cnt * cnt)
        r_eff = tsum / cnt
        if not (r_eff > 0.0):
            continue
        half = 0.5 * (cuu + cvv)
        disc = math.sqrt(max(0.25 * (cuu - cvv) ** 2 + cuv * cuv, 0.0))
        k1[n] = math.sqrt(max(half + disc, 0.0)) / r_eff
        k2[n] = math.sqrt(max(half - disc, 0.0)) / r_eff
        ok[n] = True


def pca_normals(pm: PointMap, k: Intrinsics, radius_mm: float = 10.0, threads: int = 1) -> NormalField:
    """Smallest-eigenvector normals of the point covariance within ``radius_mm``.

    The metric ball is searched inside the raster window of half-size
    ``ceil(radius_mm * fx / z)`` around each pixel.
    """
    if pm.shape != k.shape:
        raise ValueError(f"point map {pm.shape} does not match intrinsics {k.shape}")
    rows, cols = np.nonzero(pm.valid)
    normals = np.zeros(pm.shape + (3,))
    valid = np.zeros(pm.shape, dtype=bool)
    if rows.size == 0:
        return NormalField(normals, valid)
    points = np.ascontiguousarray(pm.points)
    vmask = np.ascontiguousarray(pm.valid)

    def work(idx):
        nrm = np.zeros((idx.size, 3))
        ok = np.zeros(idx.size, dtype=np.bool_)
        _pca_normals_kernel(points, vmask, rows[idx], cols[idx], k.fx, radius_mm, MIN_SAMPLES + 1, nrm, ok)
        return nrm, ok

    parts = chunked_map(work, np.arange(rows.size), threads=threads)
    normals[rows, cols] = np.concatenate([p[0] for p in parts])
    valid[rows, cols] = np.concatenate([p[1] for p in parts])
    return NormalField(normals, valid)


def pca_curvature(
    pm: PointMap, k: Intrinsics, cfg: BaselineConfig = BaselineConfig(method="pca"), threads: int = 1
) -> tuple[NormalField, CurvatureField]:
    """PCA normals, then curvature from the spread of neighbouring normals.

    Neighbour normals are projected onto the tangent plane of the centre
    normal; the eigenvalues ``l1 >= l2`` of their 2x2 covariance give
    ``k_j = sqrt(l_j) / r_eff`` with ``r_eff`` the mean tangential distance of
    the neighbours from the centre point.  Both curvatures are non-negative.
    On a sphere this scaling reads about 3/4 of the true curvature (the ratio
    of the RMS to the mean radius of a uniform disc).
    """
    nf = pca_normals(pm, k, cfg.radius_mm, threads)
    rows, cols = np.nonzero(nf.valid)
    shape = pm.shape
    if rows.size == 0:
        return nf, CurvatureField.empty(shape)
    points = np.ascontiguousarray(pm.points)
    normals = np.ascontiguousarray(nf.normals)
    nvalid = np.ascontiguousarray(nf.valid)

    def work(idx):
        a = np.zeros(idx.size)
        b = np.zeros(idx.size)
        ok = np.zeros(idx.size, dtype=np.bool_)
        _pca_curvature_kernel(points, normals, nvalid, rows[idx], cols[idx], k.fx, cfg.radius_mm,
                              MIN_SAMPLES + 1, a, b, ok)
        return a, b, ok

    parts = chunked_map(work, np.arange(rows.size), threads=threads)
    k1 = np.zeros(shape)
    k2 = np.zeros(shape)
    valid = np.zeros(shape, dtype=bool)
    k1[rows, cols] = np.concatenate([p[0] for p in parts])
    k2[rows, cols] = np.concatenate([p[1] for p in parts])
    valid[rows, cols] = np.concatenate([p[2] for p in parts])
    return nf, CurvatureField(k1, k2, valid)
