"""Pinhole projection, z-buffered disc splatting, and image-space metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, njit
from .distance import distance_transform
from .errors import BehindCameraError, ConfigurationError, EmptyMaskError

PSNR_CAP = 60.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray       # world -> camera
    translation: np.ndarray
    width: int = 256
    height: int = 256

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ConfigurationError("camera rotation must be a proper rotation")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, focal: float, width: int = 256,
            height: int = 256) -> Camera:
    """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ConfigurationError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ eye, width, height)


def camera_ring(center, radius: float, count: int, *, elevation_deg: float = 30.0,
                focal: float = 512.0, size: int = 256) -> list[Camera]:
    center = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = 2.0 * math.pi * k / count
        offset = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(center + offset, center, focal=focal, width=size, height=size))
    return cams


def project_points(camera: Camera, x) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(N, 2)`` as (u, v) and depths ``(N,)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pc = x @ camera.rotation.T + camera.translation
    depth = pc[:, 2]
    if np.any(~(depth > 0)):
        raise BehindCameraError(f"{int(np.sum(~(depth > 0)))} point(s) at or behind the camera plane")
    uv = np.empty((len(x), 2))
    uv[:, 0] = camera.fx * pc[:, 0] / depth + camera.cx
    uv[:, 1] = camera.fy * pc[:, 1] / depth + camera.cy
    return uv, depth


def project(camera: Camera, x) -> tuple[float, float, float]:
    uv, depth = project_points(camera, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def default_radii(camera: Camera, depth, particle_spacing: float) -> np.ndarray:
    return np.maximum(camera.fx * particle_spacing / np.asarray(depth), 1.0)


# ---------------------------------------------------------------- splatting

@njit
def _splat_zbuffer(uv, depth, radii, height, width):
    zbuf = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, np.int64)
    for p in range(uv.shape[0]):
        u = uv[p, 0]
        v = uv[p, 1]
        r = radii[p]
        r2 = r * r
        c0 = max(int(math.ceil(u - r)), 0)
        c1 = min(int(math.floor(u + r)), width - 1)
        r0 = max(int(math.ceil(v - r)), 0)
        r1 = min(int(math.floor(v + r)), height - 1)
        z = depth[p]
        for row in range(r0, r1 + 1):
            dv = row - v
            for col in range(c0, c1 + 1):
                du = col - u
                if du * du + dv * dv <= r2 and z < zbuf[row, col]:
                    zbuf[row, col] = z
                    owner[row, col] = p
    return owner, zbuf


def _splat_zbuffer_numpy(uv, depth, radii, height, width):
    pix, dep, idx = [], [], []
    rmax = int(math.ceil(radii.max())) if len(radii) else 0
    offs = np.arange(-rmax - 1, rmax + 2)
    for dr in offs:
        for dc in offs:
            col = np.round(uv[:, 0]).astype(np.int64) + dc
            row = np.round(uv[:, 1]).astype(np.int64) + dr
            inside = ((col - uv[:, 0]) ** 2 + (row - uv[:, 1]) ** 2 <= radii ** 2)
            inside &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
            sel = np.flatnonzero(inside)
            pix.append(row[sel] * width + col[sel])
            dep.append(depth[sel])
            idx.append(sel)
    owner = np.full(height * width, -1, np.int64)
    zbuf = np.full(height * width, np.inf)
    if pix:
        pix = np.concatenate(pix)
        dep = np.concatenate(dep)
        idx = np.concatenate(idx)
        order = np.lexsort((idx, dep, pix))
        pix, dep, idx = pix[order], dep[order], idx[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        owner[pix[first]] = idx[first]
        zbuf[pix[first]] = dep[first]
    return owner.reshape(height, width), zbuf.reshape(height, width)


def splat(points, values, radii, camera: Camera, background=0.0):
    """Opaque z-buffered discs.

    Each pixel takes the value of the nearest covering disc; equal depths
    resolve to the lowest point index. Returns ``(image, coverage, depth)``
    where ``image`` has shape ``(H, W, C)``.
    """
    H, W = camera.height, camera.width
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values = np.asarray(values if values is not None else np.ones((len(points), 1)), dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n_ch = values.shape[1]
    if len(points) == 0:
        img = np.zeros((H, W, n_ch))
        img[:] = background
        return img, np.zeros((H, W), dtype=bool), np.full((H, W), np.inf)
    uv, depth = project_points(camera, points)
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (len(points),)).copy()
    if np.any(~(radii > 0)):
        raise ConfigurationError("splat radii must be positive")
    if USE_NUMBA:
        owner, zbuf = _splat_zbuffer(np.ascontiguousarray(uv), depth, radii, H, W)
    else:
        owner, zbuf = _splat_zbuffer_numpy(uv, depth, radii, H, W)
    cover = owner >= 0
    img = np.zeros((H, W, n_ch))
    img[:] = background
    img[cover] = values[owner[cover]]
    return img, cover, zbuf


# ---------------------------------------------------------------- metrics

def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-6:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def boundary_pixels(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (or the image)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def chamfer2d(a, b) -> float:
    """Symmetric mean nearest distance between the two masks' boundary pixels."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_shape(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("chamfer distance needs two nonempty masks")
    ba = boundary_pixels(a)
    bb = boundary_pixels(b)
    d_to_b = distance_transform(bb)
    d_to_a = distance_transform(ba)
    return 0.5 * (float(d_to_b[ba].mean()) + float(d_to_a[bb].mean()))
