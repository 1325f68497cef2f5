"""File formats.

* depth: 16-bit single-channel PNG, millimetres, 0 = invalid
* intrinsics: JSON object with ``fx, fy, cx, cy, width, height``
* planes: little-endian ``uint32`` width and height, then ``float32`` planes
  stored one after another (``.f32``)
* masks: same 8-byte header followed by one ``uint8`` per pixel (``.mask``)
* labels: same 8-byte header followed by one ``uint16`` per pixel (``.u16``)
"""

from __future__ import annotations

import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from quadcurv.core import Intrinsics, RangeImage

_HEADER = np.dtype("<u4")


def read_intrinsics(path: str | os.PathLike) -> Intrinsics:
    with open(path) as fh:
        data = json.load(fh)
    return intrinsics_from_dict(data)


def intrinsics_from_dict(data: dict) -> Intrinsics:
    if not isinstance(data, dict):
        raise ValueError("intrinsics must be a JSON object")
    missing = [key for key in ("fx", "fy", "cx", "cy", "width", "height") if key not in data]
    if missing:
        raise ValueError(f"intrinsics missing field(s): {', '.join(missing)}")
    return Intrinsics(
        fx=float(data["fx"]),
        fy=float(data["fy"]),
        cx=float(data["cx"]),
        cy=float(data["cy"]),
        width=int(data["width"]),
        height=int(data["height"]),
    )


def intrinsics_to_dict(k: Intrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_intrinsics(path: str | os.PathLike, k: Intrinsics) -> None:
    atomic_write_bytes(path, (json.dumps(intrinsics_to_dict(k), indent=2) + "\n").encode())


def depth_png_bytes(img: RangeImage) -> bytes:
    d = np.where(img.valid, np.rint(img.depth), 0)
    if d.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("depth exceeds the 16-bit millimetre range")
    buf = _io.BytesIO()
    Image.fromarray(d.astype(np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def write_depth_png(path: str | os.PathLike, img: RangeImage) -> None:
    """Save depth rounded to whole millimetres; invalid pixels become 0."""
    atomic_write_bytes(path, depth_png_bytes(img))


def read_depth_png(path: str | os.PathLike) -> RangeImage:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth PNG must be single channel, got shape {arr.shape}")
    depth = arr.astype(np.float64)
    return RangeImage(depth, depth > 0)


def _header(shape: tuple[int, int]) -> bytes:
    h, w = shape
    return np.array([w, h], dtype=_HEADER).tobytes()


def _split(data: bytes, itemsize: int, path) -> tuple[tuple[int, int], bytes]:
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    w, h = np.frombuffer(data[:8], dtype=_HEADER)
    body = data[8:]
    npx = int(w) * int(h)
    if npx == 0 or len(body) % (npx * itemsize):
        raise ValueError(f"{path}: payload size {len(body)} inconsistent with {w}x{h}")
    return (int(h), int(w)), body


def planes_bytes(planes: np.ndarray) -> bytes:
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[None]
    return _header(planes.shape[1:]) + np.ascontiguousarray(planes, dtype="<f4").tobytes()


def write_planes(path: str | os.PathLike, planes: np.ndarray) -> None:
    """Write ``(P, H, W)`` (or ``(H, W)``) data as float32 planes."""
    atomic_write_bytes(path, planes_bytes(planes))


def read_planes(path: str | os.PathLike) -> np.ndarray:
    """Read float32 planes as a ``(P, H, W)`` float64 array."""
    data = Path(path).read_bytes()
    shape, body = _split(data, 4, path)
    return np.frombuffer(body, dtype="<f4").reshape((-1,) + shape).astype(np.float64)


def mask_bytes(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    return _header(mask.shape) + mask.astype(np.uint8).tobytes()


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    atomic_write_bytes(path, mask_bytes(mask))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    shape, body = _split(data, 1, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).astype(bool)


def labels_bytes(labels: np.ndarray) -> bytes:
    return _header(labels.shape) + np.ascontiguousarray(labels, dtype="<u2").tobytes()


def write_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    atomic_write_bytes(path, labels_bytes(labels))


def read_labels(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    shape, body = _split(data, 2, path)
    return np.frombuffer(body, dtype="<u2").reshape(shape).astype(np.int64)
