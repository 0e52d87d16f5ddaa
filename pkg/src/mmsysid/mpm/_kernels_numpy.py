"""Vectorised numpy implementation of the MLS-MPM substep.

Same contract as :mod:`._kernels_numba`; used when numba is disabled.
Scatter goes through ``np.bincount`` which sums in index order, so results
are deterministic.
"""

from __future__ import annotations

import numpy as np

from ._kernels_numba import BLOWUP, GRID_PAD, INVERTED, MASS_EPS, OK, SINGULAR

_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])


def polar_rotation_svd(F: np.ndarray) -> np.ndarray:
    """Batched rotation factor U V^T with the sign fix that keeps det = +1."""
    U, _, Vt = np.linalg.svd(F)
    d = np.linalg.det(U @ Vt)
    flip = d < 0
    if np.any(flip):
        U = U.copy()
        U[flip, :, 2] *= -1.0
    return U @ Vt


def _weights(x, dmin, inv_dx):
    xi = (x - dmin) * inv_dx
    base = np.floor(xi - 0.5).astype(np.int64)
    fx = xi - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    return base, fx, w


def grid_bounds(x, dmin, inv_dx):
    base = np.floor((x - dmin) * inv_dx - 0.5).astype(np.int64)
    lo = base.min(axis=0) - GRID_PAD
    shape = base.max(axis=0) + 2 + GRID_PAD - lo + 1
    return lo, shape


def _stencil(base, fx, w, lo, shape, dx):
    """Yield (flat node index, weight, offset vector) for the 27 stencil nodes."""
    rel = base - lo
    for off in _OFFSETS:
        node = rel + off
        flat = (node[:, 0] * shape[1] + node[:, 1]) * shape[2] + node[:, 2]
        weight = w[:, 0, off[0]] * w[:, 1, off[1]] * w[:, 2, off[2]]
        dpos = (off - fx) * dx
        yield flat, weight, dpos


def p2g(x, v, C, F, mass, vol, mu, lam, fint0, gravity, compensate, dx, dt, dmin, lo, shape):
    R = polar_rotation_svd(F)
    J = np.linalg.det(F)
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        return INVERTED, int(bad[0]), None, None
    inv_dx = 1.0 / dx
    tau = 2.0 * mu[:, None, None] * np.einsum("pac,pbc->pab", F - R, F)
    tau += (lam * J * (J - 1.0))[:, None, None] * np.eye(3)
    aff = (-dt * 4.0 * inv_dx * inv_dx * vol)[:, None, None] * tau + mass[:, None, None] * C
    fext = mass[:, None] * gravity[None, :]
    if compensate:
        fext = fext + np.einsum("pab,pb->pa", R, fint0)
    mom = mass[:, None] * v + dt * fext
    base, fx, w = _weights(x, dmin, inv_dx)
    ncell = int(np.prod(shape))
    grid_m = np.zeros(ncell)
    grid_mv = np.zeros((ncell, 3))
    for flat, weight, dpos in _stencil(base, fx, w, lo, shape, dx):
        grid_m += np.bincount(flat, weights=weight * mass, minlength=ncell)
        contrib = weight[:, None] * (mom + np.einsum("pab,pb->pa", aff, dpos))
        for a in range(3):
            grid_mv[:, a] += np.bincount(flat, weights=contrib[:, a], minlength=ncell)
    shp = tuple(int(s) for s in shape)
    return OK, -1, grid_m.reshape(shp), grid_mv.reshape(shp + (3,))


def grid_update(grid_m, grid_mv, lo, dx, dmin, dmax):
    finite = bool(np.all(np.isfinite(grid_mv)))
    axes = [dmin[d] + (lo[d] + np.arange(grid_m.shape[d])) * dx for d in range(3)]
    wall = np.zeros(grid_m.shape, dtype=bool)
    for d in range(3):
        wd = (axes[d] <= dmin[d]) | (axes[d] >= dmax[d])
        shp = [1, 1, 1]
        shp[d] = -1
        wall |= wd.reshape(shp)
    ok = (grid_m > MASS_EPS) & ~wall
    grid_v = np.zeros_like(grid_mv)
    grid_v[ok] = grid_mv[ok] / grid_m[ok][:, None]
    return finite, grid_v


def g2p(x, v, C, F, grid_v, dx, dt, dmin, lo):
    inv_dx = 1.0 / dx
    shape = np.array(grid_v.shape[:3])
    flat_v = grid_v.reshape(-1, 3)
    base, fx, w = _weights(x, dmin, inv_dx)
    nv = np.zeros_like(v)
    nC = np.zeros_like(C)
    for flat, weight, dpos in _stencil(base, fx, w, lo, shape, dx):
        gv = flat_v[flat]
        nv += weight[:, None] * gv
        nC += (4.0 * inv_dx * inv_dx) * weight[:, None, None] * gv[:, :, None] * dpos[:, None, :]
    v[:] = nv
    x += dt * nv
    C[:] = nC
    F[:] = F + dt * np.einsum("pac,pcb->pab", nC, F)
    J = np.linalg.det(F)
    bad = np.flatnonzero(~(J > 0))
    if bad.size:
        return INVERTED, int(bad[0])
    return OK, -1


def run_substeps(x, v, C, F, mass, vol, mu, lam, fint0, gravity, compensate,
                 dx, dt, dmin, dmax, n_sub, sub_start, sub_per_frame,
                 bc_idx, bc_start, bc_delta, kappa):
    inv_dx = 1.0 / dx
    frame_time = sub_per_frame * dt
    for s in range(n_sub):
        k = sub_start + s
        if len(bc_idx):
            target = bc_start + (k / sub_per_frame) * bc_delta
            v[bc_idx] = bc_delta / frame_time + (target - x[bc_idx]) / (kappa * dt)
        lo, shape = grid_bounds(x, dmin, inv_dx)
        try:
            status, idx, grid_m, grid_mv = p2g(x, v, C, F, mass, vol, mu, lam, fint0, gravity,
                                               compensate, dx, dt, dmin, lo, shape)
        except np.linalg.LinAlgError:
            return SINGULAR, -1, k, 0.0
        if status != OK:
            return status, idx, k, 0.0
        finite, grid_v = grid_update(grid_m, grid_mv, lo, dx, dmin, dmax)
        if not finite:
            sp = np.linalg.norm(v, axis=1)
            vmax = float(np.inf) if not np.all(np.isfinite(sp)) else float(sp.max())
            return BLOWUP, -1, k, vmax
        status, idx = g2p(x, v, C, F, grid_v, dx, dt, dmin, lo)
        if status != OK:
            return status, idx, k, 0.0
    return OK, -1, sub_start + n_sub, 0.0
