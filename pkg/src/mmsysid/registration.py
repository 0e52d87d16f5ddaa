"""Closed-form rigid registration of corresponding point sets."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateConfigurationError


def umeyama_rigid(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation with ``R @ src_i + t ~ dst_i``.

    Unit scale, ``det R = +1``. Needs at least three non-collinear points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both have shape (n, 3)")
    if len(src) < 3:
        raise DegenerateConfigurationError("rigid registration needs at least 3 correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("correspondences are collinear or coincident")
    cov = b.T @ a / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def apply_rigid(R, t, points) -> np.ndarray:
    return np.asarray(points) @ np.asarray(R).T + np.asarray(t)
