"""Contact-point motion: triangulation, 6D refinement, and velocity boundary conditions."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import quat
from .errors import ConfigurationError, DataError, UnderdeterminedError
from .registration import umeyama_rigid

log = logging.getLogger(__name__)

LAMBDA_PS = 0.1
LAMBDA_RS = 1e-4
DEFAULT_GRASP_RADIUS = 0.015


@dataclass
class ContactTrajectory:
    """Per-frame pose of the grasped contact point.

    ``rest_positions`` are the frame-0 positions of the ``near_set``
    particles; rigid targets for later frames are derived from them.
    """

    x_c: np.ndarray
    q_c: np.ndarray
    near_set: np.ndarray
    grasp_radius: float = DEFAULT_GRASP_RADIUS
    rest_positions: np.ndarray | None = None

    def __post_init__(self):
        self.x_c = np.asarray(self.x_c, dtype=np.float64).reshape(-1, 3)
        self.q_c = np.asarray(self.q_c, dtype=np.float64).reshape(-1, 4)
        self.near_set = np.asarray(self.near_set, dtype=np.int64).reshape(-1)
        if self.rest_positions is not None:
            self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64).reshape(-1, 3)
        self.validate()

    @property
    def n_frames(self) -> int:
        return len(self.x_c)

    def validate(self) -> None:
        if len(self.x_c) != len(self.q_c):
            raise DataError("contact positions and rotations differ in frame count")
        norms = np.linalg.norm(self.q_c, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DataError("contact quaternions must be unit norm")
        if len(self.near_set) == 0:
            raise ConfigurationError("contact near_set is empty")
        if self.rest_positions is not None and len(self.rest_positions) != len(self.near_set):
            raise DataError("rest_positions must match near_set")

    def targets(self) -> np.ndarray:
        if self.rest_positions is None:
            raise ConfigurationError("contact trajectory has no rest positions for its near_set")
        return rigid_targets(self, self.rest_positions)

    def to_json(self) -> list[dict]:
        return [{"frame": t + 1, "x": self.x_c[t].tolist(), "q": self.q_c[t].tolist()}
                for t in range(self.n_frames)]

    def to_dict(self) -> dict:
        return {
            "poses": self.to_json(),
            "near_set": self.near_set.tolist(),
            "grasp_radius": self.grasp_radius,
            "rest_positions": None if self.rest_positions is None else self.rest_positions.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContactTrajectory":
        poses = sorted(d["poses"], key=lambda r: r["frame"])
        return cls(
            x_c=[p["x"] for p in poses],
            q_c=[p["q"] for p in poses],
            near_set=d["near_set"],
            grasp_radius=d.get("grasp_radius", DEFAULT_GRASP_RADIUS),
            rest_positions=d.get("rest_positions"),
        )

    def sliced(self, start: int, stop: int) -> "ContactTrajectory":
        return ContactTrajectory(self.x_c[start:stop], self.q_c[start:stop], self.near_set,
                                 self.grasp_radius, self.rest_positions)


@dataclass
class Annotation2D:
    """Pixel annotations of the contact point; frames are 0-based indices."""

    frame: np.ndarray
    view: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.int64)
        self.view = np.asarray(self.view, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)

    @classmethod
    def from_json(cls, records: Sequence[dict] | str) -> "Annotation2D":
        """Parse ``[{frame, view, u, v}, ...]`` with 1-based frame numbers."""
        if isinstance(records, str):
            records = json.loads(records)
        return cls([r["frame"] - 1 for r in records], [r["view"] for r in records],
                   [r["u"] for r in records], [r["v"] for r in records])

    def to_json(self) -> list[dict]:
        return [{"frame": int(f) + 1, "view": int(c), "u": float(a), "v": float(b)}
                for f, c, a, b in zip(self.frame, self.view, self.u, self.v)]


def rigid_targets(trajectory: ContactTrajectory, rest_positions) -> np.ndarray:
    """Targets ``x_c^t + R^t (x_i^0 - x_c^0)`` for the near set, shape (T, n_c, 3).

    The rotation is taken relative to frame 0, so frame-0 targets are the
    rest positions themselves.
    """
    rest = np.asarray(rest_positions, dtype=np.float64)
    R = quat.to_matrix(trajectory.q_c)
    R_rel = R @ R[0].T
    offsets = rest - trajectory.x_c[0]
    out = trajectory.x_c[:, None, :] + np.einsum("tab,nb->tna", R_rel, offsets)
    out[0] = rest
    return out


def bc_velocity(x, target_t, target_next, config):
    """Velocity imposed on a grasped particle during one substep.

    Feed-forward term follows the rigid target between frames, the second
    term is a spring pulling the particle back onto its current target.
    """
    x = np.asarray(x, dtype=np.float64)
    target_t = np.asarray(target_t, dtype=np.float64)
    target_next = np.asarray(target_next, dtype=np.float64)
    frame_time = config.substeps_per_frame * config.dt
    return (target_next - target_t) / frame_time + (target_t - x) / (config.bc_kappa * config.dt)


def select_near_set(positions, point, radius: float = DEFAULT_GRASP_RADIUS) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    idx = np.flatnonzero(np.linalg.norm(positions - np.asarray(point), axis=1) <= radius)
    if idx.size == 0:
        raise ConfigurationError(f"no particles within {radius} m of the contact point")
    return idx


# ---------------------------------------------------------------- triangulation

@dataclass
class TriangulationResult:
    positions: np.ndarray
    residual_px: np.ndarray
    frames: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _projection_matrix(cam) -> np.ndarray:
    K = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
    return K @ np.hstack([cam.rotation, np.asarray(cam.translation).reshape(3, 1)])


def _reproject(P, X):
    h = P @ np.append(X, 1.0)
    return h[:2] / h[2]


def triangulate_point(cams, uv) -> tuple[np.ndarray, float]:
    """Linear DLT followed by one Gauss-Newton step on reprojection error."""
    if len(cams) < 2:
        raise UnderdeterminedError("triangulation needs at least two views")
    Ps = [_projection_matrix(c) for c in cams]
    rows = []
    for P, (u, v) in zip(Ps, uv):
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.asarray(rows)
    # row scaling keeps the homogeneous system well conditioned
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[-1]
    X = Xh[:3] / Xh[3]

    def residuals(X):
        return np.concatenate([_reproject(P, X) - np.asarray(p) for P, p in zip(Ps, uv)])

    r = residuals(X)
    Jm = np.empty((len(r), 3))
    for P_i, P in enumerate(Ps):
        h = P @ np.append(X, 1.0)
        Jm[2 * P_i] = (P[0, :3] * h[2] - h[0] * P[2, :3]) / h[2] ** 2
        Jm[2 * P_i + 1] = (P[1, :3] * h[2] - h[1] * P[2, :3]) / h[2] ** 2
    step, *_ = np.linalg.lstsq(Jm, -r, rcond=None)
    X_new = X + step
    if np.sum(residuals(X_new) ** 2) <= np.sum(r ** 2):
        X = X_new
    res = residuals(X).reshape(-1, 2)
    return X, float(np.sqrt(np.mean(np.sum(res ** 2, axis=1))))


def triangulate(annotations: Annotation2D, cameras, residual_threshold: float = 2.0) -> TriangulationResult:
    """Per-frame contact positions from multi-view pixel annotations."""
    frames = np.unique(annotations.frame)
    pos = np.empty((len(frames), 3))
    res = np.empty(len(frames))
    for n, f in enumerate(frames):
        sel = annotations.frame == f
        views = annotations.view[sel]
        if len(np.unique(views)) < 2:
            raise UnderdeterminedError(f"frame {int(f) + 1}: contact annotated in fewer than two views")
        uv = np.stack([annotations.u[sel], annotations.v[sel]], axis=1)
        pos[n], res[n] = triangulate_point([cameras[int(c)] for c in views], uv)
    bad = frames[res > residual_threshold]
    if bad.size:
        warnings.warn(f"triangulation residual above {residual_threshold} px in frames "
                      f"{(bad + 1).tolist()}", RuntimeWarning, stacklevel=2)
    return TriangulationResult(pos, res, frames)


# ---------------------------------------------------------------- refinement

def _rotation_jacobian(q) -> np.ndarray:
    """dR/dq for the (unnormalised) quaternion polynomial, shape (T, 4, 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], -1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(q.shape[:-1] + (4, 3, 3))


def _second_diff(a):
    return a[:-2] + a[2:] - 2.0 * a[1:-1]


def _second_diff_adjoint(r, T):
    g = np.zeros((T,) + r.shape[1:])
    g[:-2] += r
    g[2:] += r
    g[1:-1] -= 2.0 * r
    return g


@dataclass
class ContactLoss:
    coarse: np.ndarray
    tracks: np.ndarray            # (T, n_c, 3) tracks of the near set
    lambda_ps: float = LAMBDA_PS
    lambda_rs: float = LAMBDA_RS

    def terms(self, x, q) -> dict[str, float]:
        R = quat.to_matrix(q)
        d = self.tracks[0] - x[0]
        r_t = x[:, None, :] + np.einsum("tab,nb->tna", R, d) - self.tracks
        return {
            "annotation": float(np.sum((x - self.coarse) ** 2)),
            "tracking": float(np.sum(r_t ** 2)),
            "position_smoothness": float(np.sum(_second_diff(x) ** 2)) if len(x) > 2 else 0.0,
            "rotation_smoothness": float(np.sum(_second_diff(q) ** 2)) if len(q) > 2 else 0.0,
        }

    def value(self, x, q) -> float:
        t = self.terms(x, q)
        return (t["annotation"] + t["tracking"] + self.lambda_ps * t["position_smoothness"]
                + self.lambda_rs * t["rotation_smoothness"])

    def gradient(self, x, q):
        T = len(x)
        R = quat.to_matrix(q)
        d = self.tracks[0] - x[0]
        r_t = x[:, None, :] + np.einsum("tab,nb->tna", R, d) - self.tracks
        gx = 2.0 * (x - self.coarse) + 2.0 * r_t.sum(axis=1)
        gx[0] -= 2.0 * np.einsum("tab,tna->b", R, r_t)
        G = 2.0 * np.einsum("tna,nb->tab", r_t, d)
        gq = np.einsum("tab,tkab->tk", G, _rotation_jacobian(q))
        if T > 2:
            gx += self.lambda_ps * 2.0 * _second_diff_adjoint(_second_diff(x), T)
            gq += self.lambda_rs * 2.0 * _second_diff_adjoint(_second_diff(q), T)
        return gx, gq


@dataclass
class RefineResult:
    trajectory: ContactTrajectory
    loss: float
    loss_trace: list
    iterations: int
    converged: bool
    terms: dict


def refine_contact(coarse, tracks, near_set, *, rest_positions=None,
                   lambda_ps: float = LAMBDA_PS, lambda_rs: float = LAMBDA_RS,
                   grasp_radius: float = DEFAULT_GRASP_RADIUS,
                   max_iter: int = 2000, rtol: float = 1e-8) -> RefineResult:
    """Recover per-frame contact position and rotation.

    ``tracks`` is (T, N_tracked, 3); ``near_set`` indexes its second axis.
    Preconditioned gradient descent with backtracking; quaternions are
    renormalised after every accepted step, so the objective trace is
    non-increasing.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    tracks = np.asarray(tracks, dtype=np.float64)
    near_set = np.asarray(near_set, dtype=np.int64)
    if near_set.size == 0:
        raise ConfigurationError("contact near_set is empty")
    sub = tracks[:, near_set]
    T = len(coarse)
    if sub.shape[0] != T:
        raise DataError("tracks and coarse contact positions differ in frame count")

    # rotation initialisation from per-frame rigid fits of the near set
    q = np.tile([1.0, 0.0, 0.0, 0.0], (T, 1))
    if len(near_set) >= 3:
        for t in range(1, T):
            try:
                Rt, _ = umeyama_rigid(sub[0], sub[t])
                q[t] = quat.from_matrix(Rt)
            except Exception:
                q[t] = q[t - 1]
    q = quat.make_sign_consistent(q)
    x = coarse.copy()

    loss = ContactLoss(coarse, sub, lambda_ps, lambda_rs)
    spread = float(np.sum((sub[0] - coarse[0]) ** 2))
    px = 1.0 / (2.0 * (1.0 + len(near_set)) + 16.0 * lambda_ps)
    pq = 1.0 / (8.0 * max(spread, 1e-12) + 32.0 * lambda_rs)

    value = loss.value(x, q)
    trace = [value]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gx, gq = loss.gradient(x, q)
        accepted = False
        for _ in range(60):
            xn = x - step * px * gx
            qn = quat.make_sign_consistent(quat.normalize(q - step * pq * gq))
            vn = loss.value(xn, qn)
            if vn <= value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        change = (value - vn) / max(value, 1e-300)
        x, q, value = xn, qn, vn
        trace.append(value)
        step = min(step * 2.0, 4.0)
        if change < rtol or value == 0.0:
            converged = True
            break
    if not converged:
        warnings.warn(f"contact refinement stopped after {max_iter} iterations (L_c={value:.3e})",
                      RuntimeWarning, stacklevel=2)
    traj = ContactTrajectory(x, q, near_set, grasp_radius,
                             sub[0] if rest_positions is None else rest_positions)
    return RefineResult(traj, value, trace, it, converged, loss.terms(x, q))
