"""Exact Euclidean distance transform (separable lower-envelope algorithm)."""

from __future__ import annotations

import numpy as np

from ._accel import njit
from .errors import EmptyMaskError

_BIG = 1e20


@njit
def _envelope_1d(f, out, v, z):
    """Squared-distance lower envelope of parabolas rooted at ``(q, f[q])``."""
    n = f.shape[0]
    k = 0
    first = -1
    for q in range(n):
        if f[q] < _BIG:
            first = q
            break
    if first < 0:
        for q in range(n):
            out[q] = _BIG
        return
    v[0] = first
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(first + 1, n):
        if f[q] >= _BIG:
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]


@njit
def _edt_squared(mask):
    h, w = mask.shape
    n = max(h, w)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1)
    tmp = np.empty((h, w))
    for c in range(w):
        for r in range(h):
            f[r] = 0.0 if mask[r, c] else _BIG
        _envelope_1d(f[:h], out[:h], v, z)
        for r in range(h):
            tmp[r, c] = out[r]
    res = np.empty((h, w))
    for r in range(h):
        for c in range(w):
            f[c] = tmp[r, c]
        _envelope_1d(f[:w], out[:w], v, z)
        for c in range(w):
            res[r, c] = out[c]
    return res


def distance_transform_squared(mask) -> np.ndarray:
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    if mask.ndim != 2:
        raise ValueError("mask must be a 2D array")
    if not mask.any():
        raise EmptyMaskError("distance transform needs a nonempty mask")
    return _edt_squared(mask)


def distance_transform(mask) -> np.ndarray:
    """Distance in pixels from each pixel to the nearest ``True`` pixel (0 inside)."""
    return np.sqrt(distance_transform_squared(mask))


def brute_force_distance(mask) -> np.ndarray:
    """O(N^2) reference used by the tests and the benchmark."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("distance transform needs a nonempty mask")
    pts = np.argwhere(mask)
    rr, cc = np.indices(mask.shape)
    q = np.stack([rr.ravel(), cc.ravel()], axis=1)
    d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(-1).min(axis=1)
    return np.sqrt(d2.astype(np.float64)).reshape(mask.shape)
