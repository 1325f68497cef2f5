"""Iteratively reweighted Gauss-Newton fitting of parabolic quadric patches.

Each patch is modelled in a local fit frame as the height surface

    z = A/2 x^2 + B x y + C/2 y^2

after a rotation ``R`` (which carries the surface normal onto +z) and a
translation ``tz`` along the fitted normal.  A point ``p'`` expressed relative
to the patch centre maps to ``q = R p' + (0, 0, tz)`` and contributes the
residual

    eps = A/2 qx^2 + B qx qy + C/2 qy^2 - qz

which equals ``p'^T E^T Q E p'`` for the homogeneous 4x4 quadric ``Q``.
The six unknowns are updated with weighted Gauss-Newton steps; the two tilt
angles are applied as incremental rotations about the current frame's x and y
axes and composed into ``R``.

Sign convention: the fit frame's +z axis points *away* from the camera (the
opposite of the camera-facing normal), so surfaces that bulge toward the
viewer get positive curvature.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from quadcurv.core import (
    MIN_SAMPLES,
    CurvatureField,
    NormalField,
    Patch,
    PatchSampler,
    PatchSpec,
    PointMap,
    chunked_map,
    orient_toward_camera,
    patch_arrays,
)

#: Order of the parameters in Jacobian rows and update vectors.
PARAMS = ("theta_x", "theta_y", "tz", "A", "B", "C")


@dataclass(frozen=True)
class QuadricState:
    A: float = 0.0
    B: float = 0.0
    C: float = 0.0
    tz: float = 0.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def transform(self, p_rel: np.ndarray) -> np.ndarray:
        """Map centre-relative points into the fit frame."""
        q = np.asarray(p_rel, dtype=np.float64) @ np.asarray(self.rotation).T
        q[..., 2] += self.tz
        return q


@dataclass(frozen=True)
class FitConfig:
    """Solver settings.

    ``k_scale=None`` selects the self-scaling robust constant: the mean squared
    residual after the first (unweighted) step, floored at ``k_floor`` and then
    frozen.  A number fixes ``k`` for every iteration instead.
    """

    max_iters: int = 50
    step_tol: float = 1e-7
    k_scale: float | None = None
    k_floor: float = 1e-6
    rejection: bool = False
    r_multiplier: float = 2.0
    min_inliers: int = MIN_SAMPLES
    max_condition: float = 1e12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.r_multiplier > 0:
            raise ValueError("r_multiplier must be positive")
        if self.k_scale is not None and not self.k_scale > 0:
            raise ValueError("k_scale must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        return cls(**data)


@dataclass(frozen=True)
class FitResult:
    state: QuadricState
    k1: float
    k2: float
    refined_normal: np.ndarray
    converged: bool
    iterations: int
    inlier_count: int
    final_mse: float
    valid: bool = True
    history: tuple[float, ...] = ()


# --------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def rotation_to_z(d: np.ndarray) -> np.ndarray:
    """Minimal rotation(s) taking unit vector(s) ``d`` onto +z."""
    d = np.asarray(d, dtype=np.float64)
    c = d[..., 2]
    v = np.stack([d[..., 1], -d[..., 0], np.zeros_like(c)], axis=-1)
    K = skew(v)
    flipped = c < -1.0 + 1e-12
    scale = 1.0 / np.where(flipped, 1.0, 1.0 + c)
    R = np.eye(3) + K + (K @ K) * scale[..., None, None]
    return np.where(flipped[..., None, None], np.diag([1.0, -1.0, -1.0]), R)


def small_rotation(theta_x: np.ndarray, theta_y: np.ndarray) -> np.ndarray:
    """Exact rotation matrix for the rotation vector ``(theta_x, theta_y, 0)``."""
    theta = np.stack([theta_x, theta_y, np.zeros_like(theta_x)], axis=-1)
    a2 = np.einsum("...i,...i->...", theta, theta)
    a = np.sqrt(a2)
    small = a < 1e-6
    safe = np.where(small, 1.0, a)
    s = np.where(small, 1.0 - a2 / 6.0, np.sin(safe) / safe)
    c = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    K = skew(theta)
    return np.eye(3) + s[..., None, None] * K + c[..., None, None] * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """One Newton step toward the polar factor; enough for matrices already near orthonormal."""
    return 1.5 * R - 0.5 * (R @ np.swapaxes(R, -1, -2) @ R)


# --------------------------------------------------------------------------
# residual model (batched: coef (N,3) = A,B,C; q (N,S,3))


def _residuals(coef: np.ndarray, q: np.ndarray) -> np.ndarray:
    A, B, C = (coef[:, i, None] for i in range(3))
    qx, qy, qz = q
    return 0.5 * A * qx * qx + B * qx * qy + 0.5 * C * qy * qy - qz


def _jacobian(coef: np.ndarray, q: np.ndarray, tz: np.ndarray) -> np.ndarray:
    """Parameter-major Jacobian ``(N, 6, S)``."""
    A, B, C = (coef[:, i, None] for i in range(3))
    qx, qy, qz = q
    sz = qz - tz[:, None]
    J = np.empty((qx.shape[0], 6, qx.shape[1]))
    J[:, 0] = -(B * qx + C * qy) * sz - qy
    J[:, 1] = (A * qx + B * qy) * sz + qx
    J[:, 2] = -1.0
    J[:, 3] = 0.5 * qx * qx
    J[:, 4] = qx * qy
    J[:, 5] = 0.5 * qy * qy
    return J


def _transform(rot: np.ndarray, tz: np.ndarray, rel: np.ndarray) -> np.ndarray:
    """Fit-frame coordinates as a component-major ``(3, N, S)`` array.

    ``rel`` is component-major too: ``rel[0]`` holds every x coordinate.
    """
    q = np.einsum("nij,jns->ins", rot, rel)
    q[2] += tz[:, None]
    return q


def _state_arrays(state: QuadricState):
    coef = np.array([[state.A, state.B, state.C]], dtype=np.float64)
    return coef, np.array([state.tz], dtype=np.float64), np.asarray(state.rotation, dtype=np.float64)[None]


def _component_major(rel: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(rel, -1, 0))


def residual(state: QuadricState, p_rel: np.ndarray) -> np.ndarray:
    """Signed algebraic distance of centre-relative point(s) from the fitted surface."""
    p = np.asarray(p_rel, dtype=np.float64)
    coef, tz, rot = _state_arrays(state)
    q = _transform(rot, tz, _component_major(p.reshape(1, -1, 3)))
    return _residuals(coef, q).reshape(p.shape[:-1])


def residual_jacobian(state: QuadricState, p_rel: np.ndarray) -> np.ndarray:
    """Derivatives of :func:`residual` w.r.t. ``(theta_x, theta_y, tz, A, B, C)``.

    The angles are incremental rotations about the current fit frame's x and y
    axes, evaluated at zero.
    """
    p = np.asarray(p_rel, dtype=np.float64)
    coef, tz, rot = _state_arrays(state)
    q = _transform(rot, tz, _component_major(p.reshape(1, -1, 3)))
    J = np.swapaxes(_jacobian(coef, q, tz), 1, 2)
    return J.reshape(p.shape[:-1] + (6,))


def robust_weight(eps, k: float, R: float | None = None, rejection: bool = True):
    """``k / (k + eps^2)``, zeroed where ``eps^2 >= R`` when rejection is on."""
    eps = np.asarray(eps, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    w = k / (k + eps * eps)
    if rejection and R is not None:
        w = np.where(eps * eps < R, w, 0.0)
    return w


def _weights(eps, mask, k, cfg: FitConfig, weighted: bool):
    if not weighted:
        return mask.astype(np.float64)
    n = np.maximum(mask.sum(axis=1), 1)
    mse = (eps * eps * mask).sum(axis=1) / n
    R = cfg.r_multiplier * mse
    w = robust_weight(eps, k[:, None], R[:, None], rejection=cfg.rejection)
    return w * mask


def _safe_inv(h: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return np.full_like(h, np.inf)


def _solve(J: np.ndarray, w: np.ndarray, eps: np.ndarray, max_condition: float):
    """Weighted normal equations ``b = (J^T W J)^-1 J^T W eps`` with Jacobi scaling.

    ``J`` is parameter-major ``(N, 6, S)``.  Rows whose scaled system has a
    1-norm condition number above ``max_condition`` are flagged and get ``b = 0``.
    """
    Jw = J * w[:, None, :]
    H = Jw @ np.swapaxes(J, 1, 2)
    g = np.einsum("nis,ns->ni", Jw, eps)
    diag = np.einsum("nii->ni", H)
    ok = np.all(diag > 0, axis=1)
    D = np.sqrt(np.where(ok[:, None], diag, 1.0))
    Hs = H / (D[:, :, None] * D[:, None, :])
    Hs = np.where(ok[:, None, None], Hs, np.eye(6))
    with np.errstate(all="ignore"):
        try:
            Hi = np.linalg.inv(Hs)
        except np.linalg.LinAlgError:
            Hi = np.stack([_safe_inv(h) for h in Hs])
    cond = np.abs(Hs).sum(axis=1).max(axis=1) * np.abs(Hi).sum(axis=1).max(axis=1)
    ok &= np.isfinite(cond) & (cond <= max_condition)
    b = np.einsum("nij,nj->ni", Hi, g / D) / D
    return np.where(ok[:, None], b, 0.0), ok


def principal_curvatures(A, B, C):
    """Eigenvalues ``(k1 >= k2)`` of ``[[A, B], [B, C]]`` in closed form."""
    A, B, C = (np.asarray(x, dtype=np.float64) for x in (A, B, C))
    t1 = 0.5 * (A + C)
    t2 = np.sqrt(np.maximum(t1 * t1 - A * C + B * B, 0.0))
    return t1 + t2, t1 - t2


# --------------------------------------------------------------------------
# batched solver


@njit(cache=True, nogil=True)
def _cholesky_inverse(H, Hi, L):
    """Invert SPD ``H`` into ``Hi`` through a Cholesky factor; False if not positive definite."""
    n = H.shape[0]
    L[:, :] = 0.0
    for j in range(n):
        d = H[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not (d > 0.0):
            return False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            acc = H[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    for c in range(n):
        # forward then backward substitution on the unit vector e_c
        for i in range(n):
            acc = 1.0 if i == c else 0.0
            for k in range(i):
                acc -= L[i, k] * Hi[k, c]
            Hi[i, c] = acc / L[i, i]
        for i in range(n - 1, -1, -1):
            acc = Hi[i, c]
            for k in range(i + 1, n):
                acc -= L[k, i] * Hi[k, c]
            Hi[i, c] = acc / L[i, i]
    return True


@njit(cache=True, nogil=True)
def _norm1(M):
    best = 0.0
    for j in range(M.shape[1]):
        acc = 0.0
        for i in range(M.shape[0]):
            acc += abs(M[i, j])
        best = max(best, acc)
    return best


@njit(cache=True, nogil=True)
def _fit_kernel(rel, mask, rot, max_iters, step_tol, k_fixed, k_floor, rejection, r_mult,
                min_inliers, max_cond, coef, tz, valid, converged, iterations, inliers, mse, hist):
    """Per-patch IRLS loop; mirrors ``_residuals``/``_jacobian``/``_solve`` one patch at a time.

    ``rot`` holds the initial rotations and is updated in place, as are all
    output arrays.  ``k_fixed`` is NaN for the self-scaling robust constant.
    """
    N, S = mask.shape
    auto_k = np.isnan(k_fixed)
    q = np.empty((S, 3))
    eps = np.empty(S)
    w = np.empty(S)
    jrow = np.empty(6)
    H = np.empty((6, 6))
    g = np.empty(6)
    D = np.empty(6)
    b = np.empty(6)
    Hi = np.empty((6, 6))
    L = np.empty((6, 6))
    Rn = np.empty((3, 3))
    Rm = np.empty((3, 3))
    for n in range(N):
        count = 0
        for s in range(S):
            if mask[n, s]:
                count += 1
            w[s] = 1.0 if mask[n, s] else 0.0
        A = 0.0
        B = 0.0
        C = 0.0
        t = 0.0
        k = k_fixed
        ok_patch = count >= min_inliers
        done = False
        it = 0
        while ok_patch and not done and it < max_iters:
            sse = 0.0
            for s in range(S):
                if not mask[n, s]:
                    eps[s] = 0.0
                    continue
                x, y, z = rel[n, s, 0], rel[n, s, 1], rel[n, s, 2]
                qx = rot[n, 0, 0] * x + rot[n, 0, 1] * y + rot[n, 0, 2] * z
                qy = rot[n, 1, 0] * x + rot[n, 1, 1] * y + rot[n, 1, 2] * z
                qz = rot[n, 2, 0] * x + rot[n, 2, 1] * y + rot[n, 2, 2] * z + t
                q[s, 0], q[s, 1], q[s, 2] = qx, qy, qz
                e = 0.5 * A * qx * qx + B * qx * qy + 0.5 * C * qy * qy - qz
                eps[s] = e
                sse += e * e
            msq = sse / count
            if auto_k and it == 1:
                k = max(msq, k_floor)
            weighted = not (auto_k and it == 0)
            bound = r_mult * msq
            n_in = 0
            cost = 0.0
            for s in range(S):
                if not mask[n, s]:
                    w[s] = 0.0
                    continue
                if weighted:
                    e2 = eps[s] * eps[s]
                    w[s] = k / (k + e2)
                    if rejection and not (e2 < bound):
                        w[s] = 0.0
                else:
                    w[s] = 1.0
                if w[s] > 0.0:
                    n_in += 1
                cost += w[s] * eps[s] * eps[s]
            hist[n, it] = cost
            if n_in < min_inliers:
                ok_patch = False
                break

            H[:, :] = 0.0
            g[:] = 0.0
            for s in range(S):
                ws = w[s]
                if ws == 0.0:
                    continue
                qx, qy, qz = q[s, 0], q[s, 1], q[s, 2]
                sz = qz - t
                jrow[0] = -(B * qx + C * qy) * sz - qy
                jrow[1] = (A * qx + B * qy) * sz + qx
                jrow[2] = -1.0
                jrow[3] = 0.5 * qx * qx
                jrow[4] = qx * qy
                jrow[5] = 0.5 * qy * qy
                for i in range(6):
                    wi = ws * jrow[i]
                    g[i] += wi * eps[s]
                    for j in range(i, 6):
                        H[i, j] += wi * jrow[j]
            good = True
            for i in range(6):
                if not (H[i, i] > 0.0):
                    good = False
                D[i] = np.sqrt(H[i, i]) if H[i, i] > 0.0 else 1.0
            for i in range(6):
                for j in range(i, 6):
                    H[i, j] = H[i, j] / (D[i] * D[j])
                    H[j, i] = H[i, j]
                g[i] = g[i] / D[i]
            if good:
                good = _cholesky_inverse(H, Hi, L)
            if good:
                good = _norm1(H) * _norm1(Hi) <= max_cond
            if not good:
                if it == 0:
                    ok_patch = False
                break
            for i in range(6):
                acc = 0.0
                for j in range(6):
                    acc += Hi[i, j] * g[j]
                b[i] = acc / D[i]

            A -= b[3]
            B -= b[4]
            C -= b[5]
            t -= b[2]
            # compose the incremental tilt (rotation vector (-b0, -b1, 0))
            tx, ty = -b[0], -b[1]
            a2 = tx * tx + ty * ty
            if a2 < 1e-12:
                sa = 1.0 - a2 / 6.0
                ca = 0.5 - a2 / 24.0
            else:
                a = np.sqrt(a2)
                sa = np.sin(a) / a
                ca = (1.0 - np.cos(a)) / a2
            # I + sa*K + ca*K^2 for K = skew(tx, ty, 0)
            Rn[0, 0] = 1.0 - ca * ty * ty
            Rn[0, 1] = ca * tx * ty
            Rn[0, 2] = sa * ty
            Rn[1, 0] = ca * tx * ty
            Rn[1, 1] = 1.0 - ca * tx * tx
            Rn[1, 2] = -sa * tx
            Rn[2, 0] = -sa * ty
            Rn[2, 1] = sa * tx
            Rn[2, 2] = 1.0 - ca * a2
            for i in range(3):
                for j in range(3):
                    Rm[i, j] = Rn[i, 0] * rot[n, 0, j] + Rn[i, 1] * rot[n, 1, j] + Rn[i, 2] * rot[n, 2, j]
            # one Newton step toward the polar factor
            for i in range(3):
                for j in range(3):
                    Rn[i, j] = Rm[i, 0] * Rm[j, 0] + Rm[i, 1] * Rm[j, 1] + Rm[i, 2] * Rm[j, 2]
            for i in range(3):
                for j in range(3):
                    acc = Rn[i, 0] * Rm[0, j] + Rn[i, 1] * Rm[1, j] + Rn[i, 2] * Rm[2, j]
                    rot[n, i, j] = 1.5 * Rm[i, j] - 0.5 * acc
            it += 1
            step = 0.0
            for i in range(6):
                step = max(step, abs(b[i]))
            if step < step_tol:
                done = True

        coef[n, 0], coef[n, 1], coef[n, 2] = A, B, C
        tz[n] = t
        valid[n] = ok_patch
        converged[n] = ok_patch and done
        iterations[n] = it
        n_in = 0
        sse = 0.0
        for s in range(S):
            if mask[n, s] and w[s] > 0.0:
                x, y, z = rel[n, s, 0], rel[n, s, 1], rel[n, s, 2]
                qx = rot[n, 0, 0] * x + rot[n, 0, 1] * y + rot[n, 0, 2] * z
                qy = rot[n, 1, 0] * x + rot[n, 1, 1] * y + rot[n, 1, 2] * z
                qz = rot[n, 2, 0] * x + rot[n, 2, 1] * y + rot[n, 2, 2] * z + t
                e = 0.5 * A * qx * qx + B * qx * qy + 0.5 * C * qy * qy - qz
                sse += e * e
                n_in += 1
        inliers[n] = n_in
        mse[n] = sse / n_in if n_in > 0 else np.nan


def fit_batch(rel: np.ndarray, mask: np.ndarray, init_normals: np.ndarray, cfg: FitConfig, history: bool = False):
    """Fit a quadric to every patch of a batch.

    ``rel`` is ``(N, S, 3)`` centre-relative samples, ``mask`` flags the valid
    ones and ``init_normals`` are camera-facing unit normals.  Returns a dict
    of per-patch arrays.
    """
    rel = np.ascontiguousarray(rel, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    N = rel.shape[0]
    rot = np.ascontiguousarray(rotation_to_z(-np.asarray(init_normals, dtype=np.float64)))
    coef = np.zeros((N, 3))
    tz = np.zeros(N)
    valid = np.zeros(N, dtype=np.bool_)
    converged = np.zeros(N, dtype=np.bool_)
    iterations = np.zeros(N, dtype=np.int64)
    inliers = np.zeros(N, dtype=np.int64)
    mse = np.zeros(N)
    hist = np.full((N, cfg.max_iters), np.nan)
    _fit_kernel(
        rel, mask, rot, cfg.max_iters, cfg.step_tol,
        np.nan if cfg.k_scale is None else float(cfg.k_scale), cfg.k_floor, cfg.rejection,
        cfg.r_multiplier, cfg.min_inliers, cfg.max_condition,
        coef, tz, valid, converged, iterations, inliers, mse, hist,
    )
    k1, k2 = principal_curvatures(coef[:, 0], coef[:, 1], coef[:, 2])
    trace = tuple(float(v) for v in hist[0] if not np.isnan(v)) if history and N else ()
    return {
        "A": coef[:, 0],
        "B": coef[:, 1],
        "C": coef[:, 2],
        "tz": tz,
        "rotation": rot,
        "k1": k1,
        "k2": k2,
        "axis": rot[:, 2, :].copy(),
        "valid": valid,
        "converged": converged,
        "iterations": iterations,
        "inliers": inliers,
        "mse": mse,
        "history": trace,
    }


# --------------------------------------------------------------------------
# single-patch API


def irls_step(state: QuadricState, patch: Patch, cfg: FitConfig = FitConfig(), k: float | None = None):
    """One weighted Gauss-Newton step for ``patch`` at ``state``.

    Returns ``(b, weights)``.  The parameters move as ``params - b`` (angles
    composed as incremental rotations).  With ``k=None`` and an automatic
    ``cfg.k_scale`` the step is unweighted, as on the first iteration.
    ``b`` is ``None`` when the system is ill conditioned or too few inliers
    remain.
    """
    rel, mask = patch_arrays(patch)
    coef, tz, rot = _state_arrays(state)
    q = _transform(rot, tz, _component_major(rel))
    eps = _residuals(coef, q)
    k_used = cfg.k_scale if k is None else k
    w = _weights(eps, mask, np.array([k_used if k_used is not None else np.nan]), cfg, weighted=k_used is not None)
    if (w > 0).sum() < cfg.min_inliers:
        return None, w[0]
    b, ok = _solve(_jacobian(coef, q, tz), w, eps, cfg.max_condition)
    return (b[0] if ok[0] else None), w[0]


def refined_normal(state: QuadricState, point: np.ndarray | None = None) -> np.ndarray:
    """Camera-facing surface normal implied by the fitted frame."""
    n = -np.asarray(state.rotation, dtype=np.float64)[2]
    if point is None:
        return n
    return orient_toward_camera(n, np.asarray(point, dtype=np.float64))


def fit_patch(patch: Patch, init_normal: np.ndarray, cfg: FitConfig = FitConfig(), history: bool = False) -> FitResult:
    """Fit one patch starting from a planar surface aligned with ``init_normal``.

    ``init_normal`` should face the camera; curvature signs are relative to it.
    """
    rel, mask = patch_arrays(patch)
    out = fit_batch(rel, mask, np.asarray(init_normal, dtype=np.float64)[None], cfg, history=history)
    state = QuadricState(
        A=float(out["A"][0]),
        B=float(out["B"][0]),
        C=float(out["C"][0]),
        tz=float(out["tz"][0]),
        rotation=out["rotation"][0],
    )
    return FitResult(
        state=state,
        k1=float(out["k1"][0]),
        k2=float(out["k2"][0]),
        refined_normal=refined_normal(state, patch.center),
        converged=bool(out["converged"][0]),
        iterations=int(out["iterations"][0]),
        inlier_count=int(out["inliers"][0]),
        final_mse=float(out["mse"][0]),
        valid=bool(out["valid"][0]),
        history=out["history"],
    )


# --------------------------------------------------------------------------
# dense field


def curvature_field(
    pm: PointMap,
    nf: NormalField,
    spec: PatchSpec = PatchSpec(),
    cfg: FitConfig = FitConfig(),
    threads: int = 1,
) -> tuple[CurvatureField, NormalField]:
    """Fit a quadric around every pixel with a valid point and initial normal.

    Returns the curvature field and the refined normal field.
    """
    if pm.shape != nf.shape:
        raise ValueError(f"point map {pm.shape} and normal field {nf.shape} disagree")
    rows, cols = np.nonzero(pm.valid & nf.valid)
    shape = pm.shape
    if rows.size == 0:
        return CurvatureField.empty(shape), NormalField.empty(shape)
    sampler = PatchSampler(pm, spec)

    def work(idx):
        centers, rel, mask = sampler.gather(rows[idx], cols[idx])
        out = fit_batch(rel, mask, nf.normals[rows[idx], cols[idx]], cfg)
        out["valid"] &= mask.sum(axis=1) - 1 >= MIN_SAMPLES
        out["normal"] = orient_toward_camera(-out["axis"], centers)
        return out

    parts = chunked_map(work, np.arange(rows.size), threads=threads)

    def gather(key, fill, dtype=np.float64):
        arr = np.full(shape + np.shape(parts[0][key])[1:], fill, dtype=dtype)
        arr[rows, cols] = np.concatenate([p[key] for p in parts])
        return arr

    valid = gather("valid", False, bool)
    cf = CurvatureField(
        k1=gather("k1", 0.0),
        k2=gather("k2", 0.0),
        valid=valid,
        converged=gather("converged", False, bool),
        inlier_count=gather("inliers", 0, np.int32),
    )
    return cf, NormalField(gather("normal", 0.0), valid)
