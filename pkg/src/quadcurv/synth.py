"""Ray-cast synthetic range images with analytic curvature, normals and labels."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from quadcurv.core import DEFAULT_INTRINSICS, Intrinsics, RangeImage, orient_toward_camera

KINDS = ("plane", "sphere", "cylinder", "torus")

#: Edge mask parameters: dilation in pixels and neighbour depth jump in mm.
EDGE_DILATION = 2
DEPTH_JUMP = 20.0


@dataclass(frozen=True)
class ShapeSpec:
    """One analytic primitive placed in the camera frame.

    Local frames: planes are ``z = 0``; cylinders and tori have their axis
    along local z through the origin.  ``extent`` (plane half-sizes in x and y)
    and ``height`` (cylinder) bound otherwise infinite surfaces.
    """

    kind: str
    radius: float | None = None
    major_radius: float | None = None
    minor_radius: float | None = None
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1000.0]))
    label: int = 1
    extent: tuple[float, float] | None = None
    height: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.kind in ("sphere", "cylinder") and not (self.radius is not None and self.radius > 0):
            raise ValueError(f"radius: must be positive for a {self.kind}, got {self.radius}")
        if self.kind == "torus":
            if not (self.minor_radius is not None and self.minor_radius > 0):
                raise ValueError(f"minor_radius: must be positive, got {self.minor_radius}")
            if not (self.major_radius is not None and self.major_radius > self.minor_radius):
                raise ValueError(f"major_radius: must exceed minor_radius, got {self.major_radius}")
        if not (isinstance(self.label, (int, np.integer)) and 1 <= self.label < 65536):
            raise ValueError(f"label: must be an integer in [1, 65535], got {self.label}")
        if self.height is not None and not self.height > 0:
            raise ValueError(f"height: must be positive, got {self.height}")
        if self.extent is not None and not all(e > 0 for e in self.extent):
            raise ValueError(f"extent: half-sizes must be positive, got {self.extent}")
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation: must be a proper 3x3 rotation matrix")
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation: must have 3 components, got {t.shape}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_dict(cls, data: dict) -> "ShapeSpec":
        data = dict(data)
        if "kind" not in data:
            raise ValueError("kind: missing")
        if "euler_xyz_deg" in data:
            data["rotation"] = Rotation.from_euler("xyz", data.pop("euler_xyz_deg"), degrees=True).as_matrix()
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown shape field")
        for key in ("radius", "major_radius", "minor_radius", "height"):
            if data.get(key) is not None:
                data[key] = float(data[key])
        if data.get("extent") is not None:
            data["extent"] = tuple(float(e) for e in data["extent"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "label": int(self.label), "translation": self.translation.tolist()}
        if not np.allclose(self.rotation, np.eye(3)):
            out["rotation"] = self.rotation.tolist()
        for key in ("radius", "major_radius", "minor_radius", "height", "extent"):
            value = getattr(self, key)
            if value is not None:
                out[key] = list(value) if key == "extent" else value
        return out


@dataclass(frozen=True)
class GroundTruth:
    k1: np.ndarray
    k2: np.ndarray
    normal: np.ndarray
    label: np.ndarray
    edge_mask: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    @property
    def is_empty(self) -> bool:
        return not bool((self.label > 0).any())


@dataclass(frozen=True)
class NoiseSpec:
    sigma_mm: float = 0.0
    quantize_mm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.sigma_mm < 0:
            raise ValueError(f"sigma_mm: must be >= 0, got {self.sigma_mm}")
        if self.quantize_mm is not None and not self.quantize_mm > 0:
            raise ValueError(f"quantize_mm: must be positive, got {self.quantize_mm}")


# --------------------------------------------------------------------------
# intersections in the shape's local frame; rays o + t d, d given per pixel


def _nearest_positive(t0, t1, ok0, ok1):
    t0 = np.where(ok0 & (t0 > 0), t0, np.inf)
    t1 = np.where(ok1 & (t1 > 0), t1, np.inf)
    return np.minimum(t0, t1)


def _hit_plane(o, d, shape: ShapeSpec):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[..., 2]
    p = o + t[..., None] * d
    ok = np.isfinite(t) & (t > 0)
    if shape.extent is not None:
        ok &= (np.abs(p[..., 0]) <= shape.extent[0]) & (np.abs(p[..., 1]) <= shape.extent[1])
    return np.where(ok, t, np.inf)


def _quadratic_roots(a, b, c):
    """Roots of ``a t^2 + 2 b t + c``; NaN where none are real."""
    disc = b * b - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.sqrt(disc)
        # numerically stable pairing
        qq = -(b + np.copysign(s, b))
        t0 = qq / a
        t1 = c / qq
    lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
    bad = ~(disc >= 0)
    return np.where(bad, np.nan, lo), np.where(bad, np.nan, hi)


def _hit_sphere(o, d, shape: ShapeSpec):
    a = np.einsum("...i,...i->...", d, d)
    b = d @ o
    c = o @ o - shape.radius**2
    t0, t1 = _quadratic_roots(a, b, c)
    return _nearest_positive(t0, t1, np.isfinite(t0), np.isfinite(t1))


def _hit_cylinder(o, d, shape: ShapeSpec):
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = d[..., 0] * o[0] + d[..., 1] * o[1]
    c = o[0] ** 2 + o[1] ** 2 - shape.radius**2
    t0, t1 = _quadratic_roots(a, b, c)
    ok0, ok1 = np.isfinite(t0), np.isfinite(t1)
    if shape.height is not None:
        half = shape.height / 2
        with np.errstate(invalid="ignore"):
            ok0 &= np.abs(o[2] + t0 * d[..., 2]) <= half
            ok1 &= np.abs(o[2] + t1 * d[..., 2]) <= half
    return _nearest_positive(t0, t1, ok0, ok1)


def _hit_torus(o, d, shape: ShapeSpec):
    R, r = shape.major_radius, shape.minor_radius
    t = np.full(d.shape[:-1], np.inf)
    # restrict to rays through the bounding sphere, and shift the parameter so
    # the quartic is solved near the torus centre
    a = np.einsum("...i,...i->...", d, d)
    b = d @ o
    c = o @ o - (R + r) ** 2
    lo, hi = _quadratic_roots(a, b, c)
    hit = np.isfinite(lo) & (hi > 0)
    if not hit.any():
        return t
    dd = d[hit]
    t_mid = -(dd @ o) / np.einsum("ni,ni->n", dd, dd)
    o_shift = o[None, :] + t_mid[:, None] * dd
    alpha = np.einsum("ni,ni->n", dd, dd)
    beta = 2.0 * np.einsum("ni,ni->n", dd, o_shift)
    gamma = np.einsum("ni,ni->n", o_shift, o_shift) + R * R - r * r
    a2 = dd[:, 0] ** 2 + dd[:, 1] ** 2
    a1 = 2.0 * (dd[:, 0] * o_shift[:, 0] + dd[:, 1] * o_shift[:, 1])
    a0 = o_shift[:, 0] ** 2 + o_shift[:, 1] ** 2
    f = 4.0 * R * R
    coeffs = np.stack(
        [
            alpha * alpha,
            2.0 * alpha * beta,
            beta * beta + 2.0 * alpha * gamma - f * a2,
            2.0 * beta * gamma - f * a1,
            gamma * gamma - f * a0,
        ],
        axis=1,
    )
    monic = coeffs[:, 1:] / coeffs[:, :1]
    companion = np.zeros((len(monic), 4, 4))
    companion[:, 0, :] = -monic
    companion[:, 1, 0] = companion[:, 2, 1] = companion[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(companion)
    real = np.abs(roots.imag) <= 1e-6 * (R + r)
    s = np.where(real, roots.real, np.nan)
    # polish every real root with Newton on the shifted quartic
    for _ in range(4):
        fv = np.polynomial.polynomial.polyval(s.T, coeffs[:, ::-1].T, tensor=False).T
        dc = coeffs[:, :4] * np.array([4.0, 3.0, 2.0, 1.0])
        fd = np.polynomial.polynomial.polyval(s.T, dc[:, ::-1].T, tensor=False).T
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.where(fd != 0, fv / fd, 0.0)
        s = s - np.where(np.abs(step) < r, step, 0.0)
    tt = s + t_mid[:, None]
    tt = np.where(np.isfinite(tt) & (tt > 0), tt, np.inf)
    t[hit] = tt.min(axis=1)
    return t


_HITTERS = {"plane": _hit_plane, "sphere": _hit_sphere, "cylinder": _hit_cylinder, "torus": _hit_torus}


def _local_geometry(shape: ShapeSpec, p_local: np.ndarray):
    """Outward normals and signed principal curvatures ``(k1, k2)`` at local points."""
    n = np.zeros_like(p_local)
    k1 = np.zeros(p_local.shape[:-1])
    k2 = np.zeros(p_local.shape[:-1])
    if shape.kind == "plane":
        n[..., 2] = 1.0
    elif shape.kind == "sphere":
        n = p_local / np.linalg.norm(p_local, axis=-1, keepdims=True)
        k1[:] = k2[:] = 1.0 / shape.radius
    elif shape.kind == "cylinder":
        n[..., :2] = p_local[..., :2]
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        k1[:] = 1.0 / shape.radius
    else:
        R, r = shape.major_radius, shape.minor_radius
        rho = np.hypot(p_local[..., 0], p_local[..., 1])
        ring = np.zeros_like(p_local)
        ring[..., 0] = R * p_local[..., 0] / rho
        ring[..., 1] = R * p_local[..., 1] / rho
        n = p_local - ring
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        cos_theta = np.clip((rho - R) / r, -1.0, 1.0)
        k1[:] = 1.0 / r
        k2 = cos_theta / (R + r * cos_theta)
    return n, k1, k2


def torus_curvatures(major: float, minor: float, theta) -> tuple[np.ndarray, np.ndarray]:
    """Principal curvatures (k1 >= k2) of a torus at tube angle ``theta``."""
    cos_theta = np.cos(theta)
    return np.full_like(cos_theta, 1.0 / minor), cos_theta / (major + minor * cos_theta)


def render(scene: Sequence[ShapeSpec], k: Intrinsics = DEFAULT_INTRINSICS) -> tuple[RangeImage, GroundTruth]:
    """Ray cast ``scene``; the nearest hit along each pixel ray wins."""
    if not scene:
        raise ValueError("scene must contain at least one shape")
    d = k.ray_directions()
    best = np.full(k.shape, np.inf)
    owner = np.full(k.shape, -1)
    for i, shape in enumerate(scene):
        Rt = shape.rotation.T
        o_local = -Rt @ shape.translation
        d_local = d @ shape.rotation  # rows: R^T d
        t = _HITTERS[shape.kind](o_local, d_local, shape)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = i

    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    points = d * depth[..., None]
    k1 = np.zeros(k.shape)
    k2 = np.zeros(k.shape)
    normal = np.zeros(k.shape + (3,))
    label = np.zeros(k.shape, dtype=np.int64)
    for i, shape in enumerate(scene):
        sel = owner == i
        if not sel.any():
            continue
        p_local = (points[sel] - shape.translation) @ shape.rotation
        n_local, a, b = _local_geometry(shape, p_local)
        n_cam = n_local @ shape.rotation.T
        # the visible side is the inside of the surface when the outward
        # normal points away from the camera: curvature signs flip
        inside = np.einsum("ni,ni->n", n_cam, points[sel]) > 0
        a = np.where(inside, -a, a)
        b = np.where(inside, -b, b)
        k1[sel] = np.maximum(a, b)
        k2[sel] = np.minimum(a, b)
        normal[sel] = orient_toward_camera(n_cam, points[sel])
        label[sel] = shape.label

    img = RangeImage(depth, hit)
    gt = GroundTruth(k1=k1, k2=k2, normal=normal, label=label, edge_mask=edge_mask(label, depth, hit))
    return img, gt


def edge_mask(label: np.ndarray, depth: np.ndarray, hit: np.ndarray | None = None) -> np.ndarray:
    """Pixels within ``EDGE_DILATION`` px of a label change or a neighbour depth jump."""
    if hit is None:
        hit = label > 0
    seeds = np.zeros(label.shape, dtype=bool)
    for axis in (0, 1):
        a = [slice(None)] * 2
        b = [slice(None)] * 2
        a[axis], b[axis] = slice(None, -1), slice(1, None)
        a, b = tuple(a), tuple(b)
        jump = (label[a] != label[b]) | (hit[a] & hit[b] & (np.abs(depth[a] - depth[b]) > DEPTH_JUMP))
        seeds[a] |= jump
        seeds[b] |= jump
    structure = np.ones((2 * EDGE_DILATION + 1,) * 2, dtype=bool)
    return ndimage.binary_dilation(seeds, structure=structure)


def add_noise(img: RangeImage, spec: NoiseSpec) -> RangeImage:
    """Gaussian depth noise then optional quantisation; non-positive depths become invalid."""
    depth = img.depth.copy()
    if spec.sigma_mm > 0:
        # Philox is counter based: the draw for each pixel depends only on the seed
        rng = np.random.Generator(np.random.Philox(spec.seed))
        depth = depth + rng.standard_normal(depth.shape) * spec.sigma_mm
    if spec.quantize_mm:
        depth = np.round(depth / spec.quantize_mm) * spec.quantize_mm
    return RangeImage(depth, img.valid & (depth > 0))


def at_distance(shape: ShapeSpec, distance: float) -> ShapeSpec:
    t = shape.translation.copy()
    t[2] = distance
    return replace(shape, translation=t)


def distance_sweep(
    base: ShapeSpec, distances: Iterable[float], k: Intrinsics = DEFAULT_INTRINSICS
) -> list[tuple[RangeImage, GroundTruth]]:
    """Re-render ``base`` at each distance along the optical axis.

    Frames where the shape is outside the frustum come back with
    ``GroundTruth.is_empty`` set.
    """
    frames = []
    for dist in distances:
        if not dist > 0:
            raise ValueError(f"distances must be positive, got {dist}")
        frames.append(render([at_distance(base, dist)], k))
    return frames


def move_camera(scene: Sequence[ShapeSpec], rotation: np.ndarray, translation: np.ndarray) -> list[ShapeSpec]:
    """Express ``scene`` in a new camera frame given by ``x_new = rotation @ x + translation``."""
    Rc = np.asarray(rotation, dtype=np.float64)
    tc = np.asarray(translation, dtype=np.float64)
    return [replace(s, rotation=Rc @ s.rotation, translation=Rc @ s.translation + tc) for s in scene]


def look_at_rotation(yaw_deg: float, pivot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Camera motion orbiting ``pivot`` about the camera y axis by ``yaw_deg``."""
    Rc = Rotation.from_euler("y", yaw_deg, degrees=True).as_matrix()
    pivot = np.asarray(pivot, dtype=np.float64)
    return Rc, pivot - Rc @ pivot


# --------------------------------------------------------------------------
# reference scenes


def sphere_scene(radius: float = 100.0, distance: float = 800.0) -> list[ShapeSpec]:
    return [ShapeSpec("sphere", radius=radius, translation=np.array([0.0, 0.0, distance]))]


def cylinder_scene(radius: float = 90.0, distance: float = 800.0, height: float = 400.0) -> list[ShapeSpec]:
    vertical = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    return [ShapeSpec("cylinder", radius=radius, height=height, rotation=vertical,
                      translation=np.array([0.0, 0.0, distance]))]


def torus_scene(major: float = 100.0, minor: float = 30.0, distance: float = 400.0,
                tilt_deg: float = 0.0) -> list[ShapeSpec]:
    rot = Rotation.from_euler("x", tilt_deg, degrees=True).as_matrix()
    return [ShapeSpec("torus", major_radius=major, minor_radius=minor, rotation=rot,
                      translation=np.array([0.0, 0.0, distance]))]


def three_object_scene(distance: float = 1000.0) -> list[ShapeSpec]:
    """Table plane with a 50 mm sphere and a 90 mm cylinder resting on it."""
    table_rot = Rotation.from_euler("x", -70, degrees=True).as_matrix()
    up = -table_rot[:, 2]  # table normal, facing up and toward the camera
    base = np.array([0.0, 60.0, distance])
    cyl_axis = Rotation.from_euler("x", -70, degrees=True).as_matrix()
    return [
        ShapeSpec("plane", rotation=table_rot, translation=base, label=1, extent=(400.0, 400.0)),
        ShapeSpec("sphere", radius=50.0, translation=base + np.array([-150.0, 0.0, 0.0]) + 50.0 * up, label=2),
        ShapeSpec(
            "cylinder",
            radius=90.0,
            height=200.0,
            rotation=cyl_axis,
            translation=base + np.array([120.0, 0.0, 0.0]) + 100.0 * up,
            label=3,
        ),
    ]
