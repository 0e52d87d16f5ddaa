"""Forward MLS-MPM elastodynamics with gravity compensation and contact BCs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .._accel import USE_NUMBA
from ..core import GridField, MaterialSegment, ParticleSet, SimConfig, lame_from_elastic, segment_index
from ..errors import (
    DataError,
    InvertedElementError,
    NumericBlowupError,
    SingularDecompositionError,
)
from . import _kernels_numba as _nb
from . import _kernels_numpy as _np_k

log = logging.getLogger(__name__)

if USE_NUMBA:
    _run_substeps = _nb.run_substeps
else:
    _run_substeps = _np_k.run_substeps


# ---------------------------------------------------------------- pointwise ops

def polar_rotation(F) -> np.ndarray:
    """Rotation factor ``U V^T`` of ``F = U S V^T`` with det +1 (single or batched)."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fb = F[None] if single else F
    det = np.linalg.det(Fb)
    if np.any(~(det > 0)):
        raise SingularDecompositionError("polar rotation requires det F > 0")
    sv = np.linalg.svd(Fb, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-12 * sv[:, 0]):
        raise SingularDecompositionError("deformation gradient is numerically singular")
    Q = _np_k.polar_rotation_svd(Fb)
    return Q[0] if single else Q


def corotated_stress(F, mu, lam, index: int | None = None) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress ``2 mu (F - R) F^T + lam J (J - 1) I``."""
    F = np.asarray(F, dtype=np.float64)
    J = float(np.linalg.det(F))
    if not J > 0:
        raise InvertedElementError(-1 if index is None else index, det=J)
    R = polar_rotation(F)
    return 2.0 * mu * (F - R) @ F.T + lam * J * (J - 1.0) * np.eye(3)


def gravity_external_force(m, g, Q, f_int0) -> np.ndarray:
    """External force ``m g + Q f_int0`` replacing plain gravity."""
    return float(m) * np.asarray(g, dtype=np.float64) + np.asarray(Q) @ np.asarray(f_int0, dtype=np.float64)


def bspline_weights(x, config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic B-spline stencil of each particle: (base node index, weights (N,3,3))."""
    dmin = np.asarray(config.domain_min)
    base, _, w = _np_k._weights(np.atleast_2d(x), dmin, 1.0 / config.grid_spacing)
    return base, w


# ---------------------------------------------------------------- state

@dataclass
class SimState:
    particles: ParticleSet
    time: float
    frame_index: int
    f_int0: np.ndarray
    substep: int = 0

    def copy(self) -> "SimState":
        return SimState(self.particles.copy(), self.time, self.frame_index, self.f_int0.copy(), self.substep)


def init_state(particles: ParticleSet, segments: Sequence[MaterialSegment], config: SimConfig,
               frame_index: int = 0, contact=None) -> SimState:
    """Bind materials to particles and record the initial internal force ``-m g``."""
    p = particles.copy()
    p.apply_materials(segments, config)
    if contact is not None:
        p.bc_flag[:] = False
        p.bc_flag[contact.near_set] = True
    f_int0 = -p.mass[:, None] * np.asarray(config.gravity)[None, :]
    return SimState(p, frame_index * config.frame_dt, frame_index, f_int0, 0)


def _material_arrays(particles: ParticleSet, segments: Sequence[MaterialSegment]):
    idx = segment_index(segments, particles.segment)
    E = np.array([s.E for s in segments])
    nu = np.array([s.nu for s in segments])
    mu, lam = lame_from_elastic(E, nu)
    return np.ascontiguousarray(mu[idx]), np.ascontiguousarray(lam[idx])


def cfl_limit(segments: Sequence[MaterialSegment], config: SimConfig) -> float:
    rho_min = min(s.rho for s in segments)
    e_max = max(s.E for s in segments)
    return 0.1 * config.grid_spacing * math.sqrt(rho_min / e_max)


def preflight(segments: Sequence[MaterialSegment], config: SimConfig) -> bool:
    limit = cfl_limit(segments, config)
    if config.dt > limit:
        log.warning("dt=%.2e exceeds conservative CFL bound %.2e for the stiffest material",
                    config.dt, limit)
        return False
    return True


class _Stepper:
    """Holds the contiguous arrays handed to the kernels for one run."""

    def __init__(self, state: SimState, segments, contact, config: SimConfig):
        p = state.particles
        self.state = state
        self.config = config
        self.mu, self.lam = _material_arrays(p, segments)
        self.gravity = np.asarray(config.gravity, dtype=np.float64)
        self.dmin = np.asarray(config.domain_min, dtype=np.float64)
        self.dmax = np.asarray(config.domain_max, dtype=np.float64)
        for name in ("x", "v", "F", "C", "mass", "volume"):
            setattr(p, name, np.ascontiguousarray(getattr(p, name), dtype=np.float64))
        if contact is None:
            self.bc_idx = np.zeros(0, dtype=np.int64)
            self.targets = None
        else:
            self.bc_idx = np.ascontiguousarray(contact.near_set, dtype=np.int64)
            self.targets = contact.targets()

    def bc_frame(self, frame: int):
        if self.targets is None:
            empty = np.zeros((0, 3))
            return empty, empty
        if frame + 1 >= len(self.targets):
            raise DataError(f"contact trajectory ends at frame {len(self.targets)}; "
                            f"simulation needs frame {frame + 2}")
        start = np.ascontiguousarray(self.targets[frame])
        return start, np.ascontiguousarray(self.targets[frame + 1] - self.targets[frame])

    def advance(self, n_sub: int) -> None:
        st = self.state
        p = st.particles
        cfg = self.config
        start, delta = self.bc_frame(st.frame_index)
        status, idx, sub, value = _run_substeps(
            p.x, p.v, p.C, p.F, p.mass, p.volume, self.mu, self.lam, st.f_int0, self.gravity,
            bool(cfg.gravity_compensation), cfg.grid_spacing, cfg.dt, self.dmin, self.dmax,
            int(n_sub), int(st.substep), int(cfg.substeps_per_frame),
            self.bc_idx, start, delta, float(cfg.bc_kappa))
        global_sub = st.frame_index * cfg.substeps_per_frame + int(sub)
        if status == _nb.INVERTED:
            raise InvertedElementError(idx, global_sub)
        if status == _nb.SINGULAR:
            raise SingularDecompositionError(
                f"singular deformation gradient at particle {idx}, substep {global_sub}")
        if status == _nb.BLOWUP:
            raise NumericBlowupError(value, global_sub)
        st.substep += int(n_sub)
        if st.substep >= cfg.substeps_per_frame:
            st.substep -= cfg.substeps_per_frame
            st.frame_index += 1
        st.time = (st.frame_index * cfg.substeps_per_frame + st.substep) * cfg.dt


def step(state: SimState, segments, contact, config: SimConfig) -> SimState:
    """Advance one substep; returns a new state and leaves ``state`` untouched."""
    new = state.copy()
    _Stepper(new, segments, contact, config).advance(1)
    return new


# ---------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    frames: np.ndarray            # 0-based frame indices
    x: np.ndarray                 # (F, N, 3)
    v: np.ndarray | None = None
    F: np.ndarray | None = None
    C: np.ndarray | None = None
    template: ParticleSet | None = field(default=None, repr=False)
    f_int0: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def position(self, frame: int) -> np.ndarray:
        return self.x[self._row(frame)]

    def _row(self, frame: int) -> int:
        rows = np.flatnonzero(self.frames == frame)
        if rows.size == 0:
            raise KeyError(f"frame {frame} not in trajectory")
        return int(rows[0])

    def state_at(self, frame: int) -> SimState:
        """Full simulation state at a recorded frame (requires ``record_full``)."""
        if self.F is None or self.template is None:
            raise DataError("trajectory was recorded without full particle state")
        r = self._row(frame)
        p = self.template.copy()
        p.x = self.x[r].copy()
        p.v = self.v[r].copy()
        p.F = self.F[r].copy()
        p.C = self.C[r].copy()
        return SimState(p, 0.0, int(frame), self.f_int0.copy(), 0)


def simulate(initial: SimState, segments, contact, config: SimConfig, n_frames: int,
             record_full: bool = False) -> Trajectory:
    """Run ``n_frames`` frames of substeps; returns ``n_frames + 1`` snapshots."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    state = initial.copy()
    if state.substep != 0:
        raise ValueError("simulate must start on a frame boundary")
    stepper = _Stepper(state, segments, contact, config)
    p = state.particles
    n = p.n
    f0 = state.frame_index
    xs = np.empty((n_frames + 1, n, 3))
    xs[0] = p.x
    if record_full:
        vs = np.empty_like(xs)
        Fs = np.empty((n_frames + 1, n, 3, 3))
        Cs = np.empty_like(Fs)
        vs[0], Fs[0], Cs[0] = p.v, p.F, p.C
    for k in range(1, n_frames + 1):
        try:
            stepper.advance(config.substeps_per_frame)
        except (InvertedElementError, NumericBlowupError, SingularDecompositionError) as exc:
            exc.frame = f0 + k
            exc.args = (f"{exc.args[0]} (frame {f0 + k})",)
            raise
        xs[k] = p.x
        if record_full:
            vs[k], Fs[k], Cs[k] = p.v, p.F, p.C
    traj = Trajectory(np.arange(f0, f0 + n_frames + 1), xs)
    if record_full:
        traj.v, traj.F, traj.C = vs, Fs, Cs
        traj.template = initial.particles.copy()
        traj.f_int0 = initial.f_int0.copy()
    return traj


def particle_to_grid(state: SimState, segments, config: SimConfig, dt: float | None = None) -> GridField:
    """Scatter only (no grid update); used for conservation checks."""
    p = state.particles
    mu, lam = _material_arrays(p, segments)
    dmin = np.asarray(config.domain_min)
    inv_dx = 1.0 / config.grid_spacing
    lo, shape = _np_k.grid_bounds(p.x, dmin, inv_dx)
    dt = config.dt if dt is None else dt
    if USE_NUMBA:
        grid_m = np.zeros(tuple(shape))
        grid_mv = np.zeros(tuple(shape) + (3,))
        _nb.p2g(p.x, p.v, p.C, p.F, p.mass, p.volume, mu, lam, state.f_int0,
                np.asarray(config.gravity, dtype=np.float64), bool(config.gravity_compensation),
                config.grid_spacing, dt, dmin, lo.astype(np.int64), shape.astype(np.int64),
                grid_m, grid_mv)
    else:
        _, _, grid_m, grid_mv = _np_k.p2g(p.x, p.v, p.C, p.F, p.mass, p.volume, mu, lam, state.f_int0,
                                          np.asarray(config.gravity, dtype=np.float64),
                                          bool(config.gravity_compensation), config.grid_spacing,
                                          dt, dmin, lo, shape)
    return GridField(grid_m, grid_mv, lo)
