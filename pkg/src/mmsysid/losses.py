"""3D track and 2D image supervision, plus batch initial states from tracks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .distance import distance_transform
from .errors import ConfigurationError, DataError
from .render import Camera, project_points
from .mpm.engine import polar_rotation

log = logging.getLogger(__name__)

DEFAULT_2D_WEIGHTS = {"rgb": 0.1, "feature": 0.1, "dt": 1e-3}
PYRAMID_LEVELS = 3          # scales 1, 1/2, 1/4
L1_WEIGHT = 0.8
SSIM_WEIGHT = 0.2
AFFINE_NEIGHBOURS = 16


@dataclass
class ObservationBundle:
    """Everything the estimator may look at. Frame axis 0 is frame ``first_frame``."""

    track_ids: np.ndarray                 # (M,) particle index of each track
    tracks: np.ndarray                    # (T, M, 3)
    frame_dt: float
    cameras: list[Camera] = field(default_factory=list)
    masks: np.ndarray | None = None       # (T, V, H, W) bool
    distance_maps: np.ndarray | None = None
    rgb: np.ndarray | None = None         # (T, V, H, W, 3) in [0, 1]
    features: np.ndarray | None = None    # (T, V, H, W, C)
    first_frame: int = 0

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        self.tracks = np.asarray(self.tracks, dtype=np.float64)
        self.validate()

    @property
    def n_frames(self) -> int:
        return self.tracks.shape[0]

    @property
    def has_images(self) -> bool:
        return self.masks is not None and len(self.cameras) > 0

    def validate(self) -> None:
        T = self.n_frames
        if self.tracks.ndim != 3 or self.tracks.shape[1:] != (len(self.track_ids), 3):
            raise DataError("tracks must have shape (T, M, 3) matching track_ids")
        if len(np.unique(self.track_ids)) != len(self.track_ids):
            raise DataError("duplicate track ids")
        for name in ("masks", "distance_maps", "rgb", "features"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.shape[0] != T:
                raise DataError(f"{name} has {arr.shape[0]} frames, tracks have {T}")
            if arr.shape[1] != len(self.cameras):
                raise DataError(f"{name} has {arr.shape[1]} views, bundle has {len(self.cameras)} cameras")
        if self.masks is not None and self.distance_maps is not None:
            if np.any(self.distance_maps[self.masks.astype(bool)] != 0):
                raise DataError("distance maps must be exactly 0 on mask pixels")

    def frame_slice(self, start: int, stop: int) -> slice:
        """Array rows for absolute 0-based frames ``start..stop`` inclusive."""
        a = start - self.first_frame
        b = stop - self.first_frame + 1
        if a < 0 or b > self.n_frames:
            raise DataError(f"frames {start}..{stop} not covered by observations")
        return slice(a, b)


@dataclass
class TemporalBatch:
    t0: int            # 0-based first frame (inclusive)
    t1: int            # 0-based last frame (inclusive)
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    F: np.ndarray
    C: np.ndarray

    @property
    def n_intervals(self) -> int:
        return self.t1 - self.t0


def batch_ranges(batch_frames: int, n_batches: int, first: int = 0) -> list[tuple[int, int]]:
    """Contiguous windows partitioning the first ``batch_frames * n_batches`` frames."""
    return [(first + k * batch_frames, first + (k + 1) * batch_frames - 1) for k in range(n_batches)]


# ---------------------------------------------------------------- 3D

def loss_3d(simulated, tracks, track_ids, frame_rows: slice | None = None) -> float:
    """Sum over frames and tracked particles of squared position error (m^2).

    ``simulated`` is ``(T, N, 3)`` over all particles; ``tracks`` is
    ``(T, M, 3)`` with ``track_ids`` naming the simulated particle of each track.
    """
    sim = np.asarray(simulated, dtype=np.float64)
    tr = np.asarray(tracks, dtype=np.float64)
    ids = np.asarray(track_ids, dtype=np.int64)
    if frame_rows is not None:
        tr = tr[frame_rows]
    if ids.size and (ids.min() < 0 or ids.max() >= sim.shape[1]):
        bad = ids[(ids < 0) | (ids >= sim.shape[1])][0]
        raise DataError(f"track id {int(bad)} has no simulated particle")
    if sim.shape[0] != tr.shape[0]:
        raise DataError(f"trajectory has {sim.shape[0]} frames, tracks have {tr.shape[0]}")
    diff = sim[:, ids] - tr
    return float(np.sum(diff * diff))


def _affine_fits(rest, current, neighbours, weights):
    """Weighted least squares ``current_j ~ A rest_j + b`` per neighbourhood."""
    Xs = rest[neighbours]                       # (N, k, 3)
    Ys = current[neighbours]
    w = weights[..., None]
    xm = (w * Xs).sum(1) / weights.sum(1)[:, None]
    ym = (w * Ys).sum(1) / weights.sum(1)[:, None]
    dX = Xs - xm[:, None]
    dY = Ys - ym[:, None]
    Sxx = np.einsum("nk,nka,nkb->nab", weights, dX, dX)
    Syx = np.einsum("nk,nka,nkb->nab", weights, dY, dX)
    A = np.empty_like(Sxx)
    cond = np.linalg.cond(Sxx)
    good = cond < 1e10
    A[good] = Syx[good] @ np.linalg.inv(Sxx[good])
    A[~good] = np.eye(3)
    return A, xm, ym, good


def _neighbourhoods(rest, k):
    k = min(k, len(rest))
    dist, nbr = cKDTree(rest).query(rest, k=k)
    dist = np.asarray(dist).reshape(len(rest), k)
    nbr = np.asarray(nbr).reshape(len(rest), k)
    h = np.maximum(dist[:, -1:], 1e-12)
    weights = np.exp(-(dist / h) ** 2)
    return nbr, weights


def init_states_from_tracks(tracks, track_ids, t0: int, frame_dt: float, rest_positions,
                            first_frame: int = 0, k: int = AFFINE_NEIGHBOURS) -> TemporalBatch:
    """Approximate physical state at frame ``t0`` (0-based) from 3D tracks.

    Positions and velocities of untracked particles are carried by the affine
    fit of their tracked neighbourhood.
    """
    tr = np.asarray(tracks, dtype=np.float64)
    ids = np.asarray(track_ids, dtype=np.int64)
    rest = np.asarray(rest_positions, dtype=np.float64)
    T = tr.shape[0]
    r = t0 - first_frame
    if not 0 <= r < T:
        raise DataError(f"frame {t0} is outside the tracked range")
    if T < 2:
        raise DataError("at least two tracked frames are needed for velocities")
    xc = tr[r]
    if 0 < r < T - 1:
        v = (tr[r + 1] - tr[r - 1]) / (2.0 * frame_dt)
        a = (tr[r + 1] - 2.0 * tr[r] + tr[r - 1]) / frame_dt ** 2
    else:
        warnings.warn(f"frame {t0}: one-sided differences at the end of the track window",
                      RuntimeWarning, stacklevel=2)
        if r == 0:
            v = (tr[1] - tr[0]) / frame_dt
            a = (tr[2] - 2 * tr[1] + tr[0]) / frame_dt ** 2 if T >= 3 else np.zeros_like(xc)
        else:
            v = (tr[r] - tr[r - 1]) / frame_dt
            a = (tr[r] - 2 * tr[r - 1] + tr[r - 2]) / frame_dt ** 2 if T >= 3 else np.zeros_like(xc)

    rest_t = rest[ids]
    nbr, weights = _neighbourhoods(rest_t, k)
    A, xm, ym, _ = _affine_fits(rest_t, xc, nbr, weights)
    F_t = A.copy()
    det = np.linalg.det(F_t)
    bad = ~(det > 1e-6)
    if np.any(bad):
        F_t[bad] = polar_rotation(np.where(np.linalg.det(F_t[bad])[:, None, None] > 0,
                                           F_t[bad], np.eye(3)))
    # velocity gradient in current coordinates: v_j ~ v_i + C (x_j - x_i)
    B, _, _, _ = _affine_fits(xc, v, nbr, weights)

    n = len(rest)
    x = np.empty((n, 3))
    vel = np.empty((n, 3))
    acc = np.zeros((n, 3))
    F = np.empty((n, 3, 3))
    C = np.empty((n, 3, 3))
    x[ids], vel[ids], acc[ids], F[ids], C[ids] = xc, v, a, F_t, B
    untracked = np.setdiff1d(np.arange(n), ids)
    if untracked.size:
        _, nearest = cKDTree(rest_t).query(rest[untracked], k=1)
        A_n = A[nearest]
        x[untracked] = ym[nearest] + np.einsum("nab,nb->na", A_n, rest[untracked] - xm[nearest])
        vel[untracked] = v[nearest] + np.einsum("nab,nb->na", B[nearest], x[untracked] - xc[nearest])
        acc[untracked] = a[nearest]
        F[untracked] = F_t[nearest]
        C[untracked] = B[nearest]
    return TemporalBatch(t0, t0, x, vel, acc, F, C)


# ---------------------------------------------------------------- 2D

def sample_bilinear(image, uv) -> np.ndarray:
    """Bilinear lookup with border clamping plus the out-of-image distance."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    u = uv[:, 0]
    v = uv[:, 1]
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    outside = np.hypot(u - uc, v - vc)
    u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2) if W > 1 else np.zeros(len(u), np.int64)
    v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2) if H > 1 else np.zeros(len(v), np.int64)
    fu = uc - u0
    fv = vc - v0
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    val = ((1 - fv) * ((1 - fu) * img[v0, u0] + fu * img[v0, u1])
           + fv * ((1 - fu) * img[v1, u0] + fu * img[v1, u1]))
    return val + outside


def loss_dt(positions, cameras: Sequence[Camera], distance_maps) -> float:
    """View-averaged mean distance-map value at projected particle positions."""
    if len(cameras) == 0:
        raise ConfigurationError("distance-transform loss needs at least one view")
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    total = 0.0
    for cam, dmap in zip(cameras, distance_maps):
        uv, _ = project_points(cam, pos)
        total += float(sample_bilinear(dmap, uv).mean())
    return total / len(cameras)


def downsample(img) -> np.ndarray:
    """2x2 area average (odd trailing row/column dropped)."""
    H, W = img.shape[:2]
    h, w = H // 2, W // 2
    a = img[:2 * h, :2 * w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def pyramid(img, levels: int = PYRAMID_LEVELS) -> list[np.ndarray]:
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


def _gauss(img, sigma=1.5):
    # 11-tap window: radius 5 at sigma 1.5
    return ndimage.gaussian_filter(img, sigma, truncate=5.0 / sigma, mode="reflect")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _gauss(x), _gauss(y)
        sxx = _gauss(x * x) - mx * mx
        syy = _gauss(y * y) - my * my
        sxy = _gauss(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def multiscale_l1(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([np.abs(x - y).mean() for x, y in zip(pyramid(a), pyramid(b))]))


def loss_rgb(rendered, reference) -> float:
    """0.8 multiscale L1 + 0.2 D-SSIM, both averaged over the pyramid."""
    ra, rb = pyramid(rendered), pyramid(reference)
    if ra[0].shape != rb[0].shape:
        raise ValueError(f"image dimension mismatch: {ra[0].shape} vs {rb[0].shape}")
    l1 = np.mean([np.abs(x - y).mean() for x, y in zip(ra, rb)])
    dssim = np.mean([(1.0 - ssim(x, y)) / 2.0 for x, y in zip(ra, rb)])
    return float(L1_WEIGHT * l1 + SSIM_WEIGHT * dssim)


def loss_feature(rendered, reference) -> float:
    return multiscale_l1(rendered, reference)


@dataclass
class Renders:
    """Simulated observations for a frame window: positions plus per-view images."""

    positions: np.ndarray           # (T, N, 3)
    rgb: np.ndarray | None = None   # (T, V, H, W, 3)
    features: np.ndarray | None = None


def loss_2d(renders: Renders, bundle: ObservationBundle, frame_rows: slice,
            weights: dict | None = None) -> tuple[float, dict]:
    """Weighted image loss summed over frames; returns (total, components)."""
    w = dict(DEFAULT_2D_WEIGHTS if weights is None else weights)
    if not bundle.has_images:
        raise ConfigurationError("2D loss needs cameras and masks")
    comps = {"rgb": 0.0, "feature": 0.0, "dt": 0.0}
    T = renders.positions.shape[0]
    for t in range(T):
        row = frame_rows.start + t
        if bundle.distance_maps is not None and w.get("dt", 0.0) != 0.0:
            comps["dt"] += loss_dt(renders.positions[t], bundle.cameras, bundle.distance_maps[row])
        if renders.rgb is not None and bundle.rgb is not None and w.get("rgb", 0.0) != 0.0:
            comps["rgb"] += float(np.mean([loss_rgb(renders.rgb[t, c], bundle.rgb[row, c])
                                            for c in range(len(bundle.cameras))]))
        if renders.features is not None and bundle.features is not None and w.get("feature", 0.0) != 0.0:
            comps["feature"] += float(np.mean([loss_feature(renders.features[t, c], bundle.features[row, c])
                                                for c in range(len(bundle.cameras))]))
    total = sum(w.get(k, 0.0) * v for k, v in comps.items())
    log.debug("L2D components %s", comps)
    return float(total), comps


def combine_2d(components: dict, weights: dict | None = None) -> float:
    w = DEFAULT_2D_WEIGHTS if weights is None else weights
    return float(sum(w.get(k, 0.0) * v for k, v in components.items()))


def distance_maps_from_masks(masks) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    out = np.empty(masks.shape, dtype=np.float32)
    for idx in np.ndindex(*masks.shape[:-2]):
        out[idx] = distance_transform(masks[idx])
    return out
