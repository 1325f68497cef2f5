"""Shared geometric data model: intrinsics, depth grids, point maps, fields and patches.

All arrays follow numpy's ``(height, width)`` raster layout.  Distances are in
millimetres and curvatures in inverse millimetres.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

#: Minimum number of valid non-centre samples for a patch to be usable.
MIN_SAMPLES = 12

#: Fixed number of pixels per work item in the dense per-pixel maps.  Keeping it
#: independent of the worker count makes results bitwise reproducible.
CHUNK_SIZE = 2048

T = TypeVar("T")


def _frozen(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.flags.writeable = False


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside (0, width={self.width})")
        if not (0 < self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside (0, height={self.height})")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the same camera resampled to ``factor`` times the resolution."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def ray_directions(self) -> np.ndarray:
        """Per-pixel ray directions scaled so that their z component is 1."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = (u - self.cx) / self.fx
        d[..., 1] = (v - self.cy) / self.fy
        d[..., 2] = 1.0
        return d


#: Kinect-class VGA camera used for the synthetic scenes.
DEFAULT_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class RangeImage:
    depth: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
        ok = np.isfinite(depth) & (depth > 0)
        valid = ok if self.valid is None else np.asarray(self.valid, dtype=bool) & ok
        if valid.shape != depth.shape:
            raise ValueError("valid mask shape does not match depth")
        depth = np.where(valid, depth, 0.0)
        _frozen(depth, valid)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class PointMap:
    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if points.shape != valid.shape + (3,):
            raise ValueError(f"points {points.shape} and mask {valid.shape} disagree")
        points = np.where(valid[..., None], points, 0.0)
        _frozen(points, valid)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class NormalField:
    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        normals = np.asarray(self.normals, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if normals.shape != valid.shape + (3,):
            raise ValueError(f"normals {normals.shape} and mask {valid.shape} disagree")
        normals = np.where(valid[..., None], normals, 0.0)
        _frozen(normals, valid)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "NormalField":
        return cls(np.zeros(shape + (3,)), np.zeros(shape, dtype=bool))


@dataclass(frozen=True)
class CurvatureField:
    k1: np.ndarray
    k2: np.ndarray
    valid: np.ndarray
    converged: np.ndarray = None
    inlier_count: np.ndarray = None

    def __post_init__(self):
        valid = np.asarray(self.valid, dtype=bool)
        k1 = np.where(valid, np.asarray(self.k1, dtype=np.float64), 0.0)
        k2 = np.where(valid, np.asarray(self.k2, dtype=np.float64), 0.0)
        converged = valid.copy() if self.converged is None else np.asarray(self.converged, bool) & valid
        inliers = (
            np.zeros(valid.shape, dtype=np.int32)
            if self.inlier_count is None
            else np.asarray(self.inlier_count, dtype=np.int32)
        )
        if not (k1.shape == k2.shape == valid.shape == converged.shape == inliers.shape):
            raise ValueError("curvature field arrays must share one shape")
        _frozen(k1, k2, valid, converged, inliers)
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "converged", converged)
        object.__setattr__(self, "inlier_count", inliers)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "CurvatureField":
        z = np.zeros(shape)
        return cls(z, z, np.zeros(shape, dtype=bool))


@dataclass(frozen=True)
class PatchSpec:
    """Square sampling window: ``window`` pixels wide, sampled every ``stride`` pixels."""

    window: int = 37
    stride: int = 3

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if not (1 <= self.stride < self.window):
            raise ValueError(f"stride must be in [1, window), got {self.stride}")

    @property
    def half(self) -> int:
        return self.window // 2

    def offsets(self) -> np.ndarray:
        """``(S, 2)`` array of (row, col) offsets; symmetric and always containing (0, 0)."""
        n = self.half // self.stride
        steps = np.arange(-n, n + 1) * self.stride
        dv, du = np.meshgrid(steps, steps, indexing="ij")
        return np.stack([dv.ravel(), du.ravel()], axis=1)

    @property
    def center_index(self) -> int:
        return len(self.offsets()) // 2


@dataclass(frozen=True)
class Patch:
    """Valid window samples expressed relative to the centre point.

    ``rel_points`` holds the non-centre samples only; the centre itself sits at
    the origin of this frame.
    """

    center: np.ndarray
    rel_points: np.ndarray
    deficient: bool = False

    @property
    def count(self) -> int:
        return len(self.rel_points)


def backproject(img: RangeImage, k: Intrinsics) -> PointMap:
    """Lift a z-depth image to camera-frame points."""
    if img.shape != k.shape:
        raise ValueError(f"range image {img.shape} does not match intrinsics {k.shape}")
    pts = k.ray_directions() * img.depth[..., None]
    return PointMap(pts, img.valid)


def project(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points to ``(u, v, depth)``."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    u = k.fx * points[..., 0] / z + k.cx
    v = k.fy * points[..., 1] / z + k.cy
    return u, v, z


class PatchSampler:
    """Gathers strided windows around many pixels of a point map at once."""

    def __init__(self, pm: PointMap, spec: PatchSpec):
        self.spec = spec
        self.offsets = spec.offsets()
        h = spec.half
        self._points = np.pad(pm.points, ((h, h), (h, h), (0, 0)))
        self._valid = np.pad(pm.valid, h)
        self._pm = pm

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(centers (N,3), rel (N,S,3), mask (N,S))``; invalid samples are zeroed."""
        h = self.spec.half
        rr = rows[:, None] + self.offsets[:, 0] + h
        cc = cols[:, None] + self.offsets[:, 1] + h
        mask = self._valid[rr, cc]
        centers = self._pm.points[rows, cols]
        rel = self._points[rr, cc] - centers[:, None, :]
        rel[~mask] = 0.0
        return centers, rel, mask


def extract_patch(
    pm: PointMap, center: tuple[int, int], spec: PatchSpec, min_samples: int = MIN_SAMPLES
) -> Patch | None:
    """Collect the valid strided window samples around ``center = (row, col)``.

    Returns ``None`` when the centre pixel itself is invalid.
    """
    r, c = center
    if not (0 <= r < pm.shape[0] and 0 <= c < pm.shape[1]) or not pm.valid[r, c]:
        return None
    centers, rel, mask = PatchSampler(pm, spec).gather(np.array([r]), np.array([c]))
    keep = mask[0].copy()
    keep[spec.center_index] = False
    rel_points = rel[0][keep]
    return Patch(center=centers[0], rel_points=rel_points, deficient=len(rel_points) < min_samples)


def patch_arrays(patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Single-patch batch ``(rel (1,S,3), mask (1,S))`` with the centre prepended at the origin."""
    rel = np.vstack([np.zeros((1, 3)), patch.rel_points])[None]
    return rel, np.ones(rel.shape[:2], dtype=bool)


def chunked_map(
    fn: Callable[[np.ndarray], T], indices: np.ndarray, threads: int = 1, chunk: int = CHUNK_SIZE
) -> list[T]:
    """Apply ``fn`` to fixed-size chunks of ``indices``, in order.

    Chunk boundaries never depend on ``threads`` so outputs are identical for
    every worker count.
    """
    chunks: Sequence[np.ndarray] = [indices[i : i + chunk] for i in range(0, len(indices), chunk)]
    if threads <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def orient_toward_camera(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Flip normals so that ``n . p < 0``."""
    dot = np.einsum("...i,...i->...", normals, points)
    return np.where((dot >= 0)[..., None], -normals, normals)


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle in radians between unit vectors along the last axis."""
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(cross, np.einsum("...i,...i->...", a, b))
