"""Loop kernels for the MLS-MPM substep, compiled with numba.

All kernels are serial on purpose: with a fixed visiting order the particle
to grid scatter is bit-reproducible. Parallelism lives one level up, across
independent simulations.
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import njit

OK = 0
INVERTED = 1
BLOWUP = 2
SINGULAR = 3

GRID_PAD = 2
MASS_EPS = 1e-12


@njit
def _det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@njit
def _inv_transpose3(A, out):
    """Writes inv(A).T into ``out``; returns det(A)."""
    det = _det3(A)
    inv_det = 1.0 / det
    # cofactor matrix / det == inv(A).T
    out[0, 0] = (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]) * inv_det
    out[0, 1] = -(A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0]) * inv_det
    out[0, 2] = (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]) * inv_det
    out[1, 0] = -(A[0, 1] * A[2, 2] - A[0, 2] * A[2, 1]) * inv_det
    out[1, 1] = (A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]) * inv_det
    out[1, 2] = -(A[0, 0] * A[2, 1] - A[0, 1] * A[2, 0]) * inv_det
    out[2, 0] = (A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]) * inv_det
    out[2, 1] = -(A[0, 0] * A[1, 2] - A[0, 2] * A[1, 0]) * inv_det
    out[2, 2] = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]) * inv_det
    return det


@njit(inline="always")
def _newton_polar9(a, b, c, d, e, f, g, h, i):
    """Orthogonal polar factor of the row-major 3x3 matrix (a..i).

    Scaled Newton iteration R <- (s R + R^-T / s) / 2 on scalars; for a
    positive determinant the limit is the rotation U V^T of the SVD.
    Returns (ok, r00..r22); ok is False when the matrix is singular.
    """
    for it in range(60):
        c00 = e * i - f * h
        c01 = -(d * i - f * g)
        c02 = d * h - e * g
        det = a * c00 + b * c01 + c * c02
        if not (det > 1e-300) or not math.isfinite(det):
            return False, a, b, c, d, e, f, g, h, i
        c10 = -(b * i - c * h)
        c11 = a * i - c * g
        c12 = -(a * h - b * g)
        c20 = b * f - c * e
        c21 = -(a * f - c * d)
        c22 = a * e - b * d
        # determinant scaling speeds up early iterations far from a rotation
        s = 1.0
        if it < 8 and abs(det - 1.0) > 0.05:
            s = det ** (-1.0 / 3.0)
        k = 1.0 / (s * det)
        na = 0.5 * (s * a + c00 * k)
        nb = 0.5 * (s * b + c01 * k)
        nc = 0.5 * (s * c + c02 * k)
        nd = 0.5 * (s * d + c10 * k)
        ne = 0.5 * (s * e + c11 * k)
        nf = 0.5 * (s * f + c12 * k)
        ng = 0.5 * (s * g + c20 * k)
        nh = 0.5 * (s * h + c21 * k)
        ni = 0.5 * (s * i + c22 * k)
        diff = ((na - a) ** 2 + (nb - b) ** 2 + (nc - c) ** 2 + (nd - d) ** 2 + (ne - e) ** 2
                + (nf - f) ** 2 + (ng - g) ** 2 + (nh - h) ** 2 + (ni - i) ** 2)
        a, b, c, d, e, f, g, h, i = na, nb, nc, nd, ne, nf, ng, nh, ni
        if diff < 1e-30:
            break
    return True, a, b, c, d, e, f, g, h, i


@njit
def polar_rotation_newton(F, R, work):
    """Array wrapper around the scalar Newton polar iteration. Returns ok."""
    ok, R[0, 0], R[0, 1], R[0, 2], R[1, 0], R[1, 1], R[1, 2], R[2, 0], R[2, 1], R[2, 2] = _newton_polar9(
        F[0, 0], F[0, 1], F[0, 2], F[1, 0], F[1, 1], F[1, 2], F[2, 0], F[2, 1], F[2, 2])
    return ok


@njit
def _bspline_weights(fx, w):
    for d in range(3):
        f = fx[d]
        w[d, 0] = 0.5 * (1.5 - f) ** 2
        w[d, 1] = 0.75 - (f - 1.0) ** 2
        w[d, 2] = 0.5 * (f - 0.5) ** 2


@njit
def grid_bounds(x, dmin, inv_dx):
    n = x.shape[0]
    lo = np.empty(3, np.int64)
    hi = np.empty(3, np.int64)
    for d in range(3):
        lo[d] = 1 << 40
        hi[d] = -(1 << 40)
    for p in range(n):
        for d in range(3):
            b = int(math.floor((x[p, d] - dmin[d]) * inv_dx - 0.5))
            if b < lo[d]:
                lo[d] = b
            if b > hi[d]:
                hi[d] = b
    shape = np.empty(3, np.int64)
    for d in range(3):
        lo[d] -= GRID_PAD
        shape[d] = hi[d] + 2 + GRID_PAD - lo[d] + 1
    return lo, shape


@njit
def p2g(x, v, C, F, mass, vol, mu, lam, fint0, gravity, compensate,
        dx, dt, dmin, lo, shape, grid_m, grid_mv):
    """Scatter mass and APIC/MLS momentum (stress and external force included).

    Returns (status, index).
    """
    n = x.shape[0]
    inv_dx = 1.0 / dx
    stress_coef = -dt * 4.0 * inv_dx * inv_dx
    R = np.empty((3, 3))
    work = np.empty((3, 3))
    aff = np.empty((3, 3))
    w = np.empty((3, 3))
    fx = np.empty(3)
    base = np.empty(3, np.int64)
    fext = np.empty(3)
    mom = np.empty(3)
    for p in range(n):
        Fp = F[p]
        J = _det3(Fp)
        if not (J > 0.0):
            return INVERTED, p
        ok, R[0, 0], R[0, 1], R[0, 2], R[1, 0], R[1, 1], R[1, 2], R[2, 0], R[2, 1], R[2, 2] = _newton_polar9(
            Fp[0, 0], Fp[0, 1], Fp[0, 2], Fp[1, 0], Fp[1, 1], Fp[1, 2], Fp[2, 0], Fp[2, 1], Fp[2, 2])
        if not ok:
            return SINGULAR, p
        for d in range(3):
            xi = (x[p, d] - dmin[d]) * inv_dx
            base[d] = int(math.floor(xi - 0.5))
            fx[d] = xi - base[d]
        _bspline_weights(fx, w)
        m = mass[p]
        two_mu = 2.0 * mu[p]
        vol_term = lam[p] * J * (J - 1.0)
        scale = stress_coef * vol[p]
        for a in range(3):
            for b in range(3):
                # tau = 2 mu (F - R) F^T + lam J (J - 1) I
                s = 0.0
                for c in range(3):
                    s += (Fp[a, c] - R[a, c]) * Fp[b, c]
                tau = two_mu * s
                if a == b:
                    tau += vol_term
                aff[a, b] = scale * tau + m * C[p, a, b]
        for d in range(3):
            f = m * gravity[d]
            if compensate:
                f += R[d, 0] * fint0[p, 0] + R[d, 1] * fint0[p, 1] + R[d, 2] * fint0[p, 2]
            fext[d] = dt * f
            mom[d] = m * v[p, d] + fext[d]
        for i in range(3):
            gi = base[0] - lo[0] + i
            dpx = (i - fx[0]) * dx
            for j in range(3):
                gj = base[1] - lo[1] + j
                dpy = (j - fx[1]) * dx
                wij = w[0, i] * w[1, j]
                for k in range(3):
                    gk = base[2] - lo[2] + k
                    dpz = (k - fx[2]) * dx
                    weight = wij * w[2, k]
                    grid_m[gi, gj, gk] += weight * m
                    for a in range(3):
                        grid_mv[gi, gj, gk, a] += weight * (
                            mom[a] + aff[a, 0] * dpx + aff[a, 1] * dpy + aff[a, 2] * dpz)
    return OK, -1


@njit
def grid_update(grid_m, grid_mv, grid_v, lo, dx, dmin, dmax):
    """Momentum to velocity, sticky walls. Returns False on non-finite values."""
    nx, ny, nz = grid_m.shape
    finite = True
    for i in range(nx):
        px = dmin[0] + (lo[0] + i) * dx
        wall_x = px <= dmin[0] or px >= dmax[0]
        for j in range(ny):
            py = dmin[1] + (lo[1] + j) * dx
            wall_y = py <= dmin[1] or py >= dmax[1]
            for k in range(nz):
                pz = dmin[2] + (lo[2] + k) * dx
                wall = wall_x or wall_y or pz <= dmin[2] or pz >= dmax[2]
                m = grid_m[i, j, k]
                for a in range(3):
                    val = 0.0
                    if m > MASS_EPS and not wall:
                        val = grid_mv[i, j, k, a] / m
                    if not math.isfinite(grid_mv[i, j, k, a]):
                        finite = False
                    grid_v[i, j, k, a] = val
    return finite


@njit
def g2p(x, v, C, F, grid_v, dx, dt, dmin, lo):
    """Gather velocity and affine velocity, advect, update F. Returns (status, index)."""
    n = x.shape[0]
    inv_dx = 1.0 / dx
    w = np.empty((3, 3))
    fx = np.empty(3)
    base = np.empty(3, np.int64)
    nv = np.empty(3)
    nC = np.empty((3, 3))
    Fn = np.empty((3, 3))
    c_coef = 4.0 * inv_dx * inv_dx
    for p in range(n):
        for d in range(3):
            xi = (x[p, d] - dmin[d]) * inv_dx
            base[d] = int(math.floor(xi - 0.5))
            fx[d] = xi - base[d]
        _bspline_weights(fx, w)
        for a in range(3):
            nv[a] = 0.0
            for b in range(3):
                nC[a, b] = 0.0
        for i in range(3):
            gi = base[0] - lo[0] + i
            dpx = (i - fx[0]) * dx
            for j in range(3):
                gj = base[1] - lo[1] + j
                dpy = (j - fx[1]) * dx
                wij = w[0, i] * w[1, j]
                for k in range(3):
                    gk = base[2] - lo[2] + k
                    dpz = (k - fx[2]) * dx
                    weight = wij * w[2, k]
                    for a in range(3):
                        gv = grid_v[gi, gj, gk, a]
                        nv[a] += weight * gv
                        wg = c_coef * weight * gv
                        nC[a, 0] += wg * dpx
                        nC[a, 1] += wg * dpy
                        nC[a, 2] += wg * dpz
        for a in range(3):
            v[p, a] = nv[a]
            x[p, a] += dt * nv[a]
            for b in range(3):
                C[p, a, b] = nC[a, b]
        for a in range(3):
            for b in range(3):
                s = F[p, a, b]
                for c in range(3):
                    s += dt * nC[a, c] * F[p, c, b]
                Fn[a, b] = s
        for a in range(3):
            for b in range(3):
                F[p, a, b] = Fn[a, b]
        if not (_det3(Fn) > 0.0):
            return INVERTED, p
    return OK, -1


@njit
def run_substeps(x, v, C, F, mass, vol, mu, lam, fint0, gravity, compensate,
                 dx, dt, dmin, dmax, n_sub, sub_start, sub_per_frame,
                 bc_idx, bc_start, bc_delta, kappa):
    """Advance ``n_sub`` substeps in place.

    ``bc_start``/``bc_delta`` are the frame-start rigid targets of the bc
    particles and their change over the frame; the target at substep ``s``
    is interpolated linearly. Returns (status, particle, substep, value).
    """
    inv_dx = 1.0 / dx
    nbc = bc_idx.shape[0]
    frame_time = sub_per_frame * dt
    for s in range(n_sub):
        k = sub_start + s
        if nbc > 0:
            frac = k / sub_per_frame
            for q in range(nbc):
                p = bc_idx[q]
                for a in range(3):
                    target = bc_start[q, a] + frac * bc_delta[q, a]
                    v[p, a] = bc_delta[q, a] / frame_time + (target - x[p, a]) / (kappa * dt)
        lo, shape = grid_bounds(x, dmin, inv_dx)
        grid_m = np.zeros((shape[0], shape[1], shape[2]))
        grid_mv = np.zeros((shape[0], shape[1], shape[2], 3))
        status, idx = p2g(x, v, C, F, mass, vol, mu, lam, fint0, gravity, compensate,
                          dx, dt, dmin, lo, shape, grid_m, grid_mv)
        if status != OK:
            return status, idx, k, 0.0
        grid_v = np.empty_like(grid_mv)
        if not grid_update(grid_m, grid_mv, grid_v, lo, dx, dmin, dmax):
            vmax = 0.0
            for p in range(x.shape[0]):
                sp = math.sqrt(v[p, 0] ** 2 + v[p, 1] ** 2 + v[p, 2] ** 2)
                if sp > vmax or not math.isfinite(sp):
                    vmax = sp
            return BLOWUP, -1, k, vmax
        status, idx = g2p(x, v, C, F, grid_v, dx, dt, dmin, lo)
        if status != OK:
            return status, idx, k, 0.0
    return OK, -1, sub_start + n_sub, 0.0
