from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import beam
from mmsysid.contact import ContactTrajectory, select_near_set
from mmsysid.core import MaterialSegment, SimConfig
from mmsysid.errors import DataError, InvertedElementError, NumericError, SingularDecompositionError
from mmsysid.mpm import (
    bspline_weights,
    cfl_limit,
    corotated_stress,
    gravity_external_force,
    init_state,
    particle_to_grid,
    polar_rotation,
    preflight,
    simulate,
    step,
)

rotations = st.integers(0, 2**32 - 1).map(lambda s: Rotation.random(random_state=s).as_matrix())


# ---------------------------------------------------------------- pointwise operations

@given(st.lists(st.floats(-0.4, 0.4), min_size=3, max_size=3))
def test_bspline_partition_of_unity(pos):
    w = bspline_weights(np.array([pos]), SimConfig())[1][0]
    # tensor-product weights: each axis sums to one, so does the 27-node product
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert abs(np.einsum("i,j,k->", w[0], w[1], w[2]) - 1.0) < 1e-12
    assert np.all(w >= 0)


@given(rotations, st.floats(1e2, 1e7), st.floats(0.05, 0.45))
def test_corotated_stress_vanishes_on_rotations(R, E, nu):
    mu, lam = E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu))
    tau = corotated_stress(R, mu, lam)
    assert np.abs(tau).max() <= 1e-10 * max(mu, lam)


def test_corotated_stress_uniaxial_value():
    # F = diag(s, 1, 1): R = I, tau = 2 mu (s - 1) s e1 e1^T + lam s (s - 1) I
    s, mu, lam = 1.1, 2.0, 3.0
    tau = corotated_stress(np.diag([s, 1.0, 1.0]), mu, lam)
    expected = lam * s * (s - 1) * np.eye(3)
    expected[0, 0] += 2 * mu * (s - 1) * s
    np.testing.assert_allclose(tau, expected, atol=1e-14)


def test_corotated_stress_rejects_inverted():
    with pytest.raises(InvertedElementError):
        corotated_stress(np.diag([-1.0, 1.0, 1.0]), 1.0, 1.0, index=7)


@given(rotations, st.lists(st.floats(0.5, 2.0), min_size=3, max_size=3), rotations)
def test_polar_rotation_factors(U, s, V):
    F = U @ np.diag(s) @ V.T
    R = polar_rotation(F)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    S = R.T @ F
    np.testing.assert_allclose(S, S.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(0.5 * (S + S.T)) > 0)


def test_polar_rotation_singular():
    with pytest.raises(SingularDecompositionError):
        polar_rotation(np.diag([1.0, 1.0, 0.0]))


def test_gravity_external_force_cancels_at_rest():
    m, g = 2.0, np.array([0.0, 0.0, -9.81])
    f0 = -m * g
    np.testing.assert_allclose(gravity_external_force(m, g, np.eye(3), f0), 0.0, atol=1e-15)
    R = Rotation.from_euler("x", 90, degrees=True).as_matrix()
    np.testing.assert_allclose(gravity_external_force(m, g, R, f0), m * g + R @ f0, atol=1e-15)


# ---------------------------------------------------------------- conservation

def _random_state(seed, segs, cfg):
    rng = np.random.default_rng(seed)
    p = beam((8, 4, 4))
    p.x = p.x + 1e-4 * rng.normal(size=p.x.shape)
    p.v = rng.normal(size=p.x.shape)
    p.C = rng.normal(size=(p.n, 3, 3))
    return init_state(p, segs, cfg)


@given(st.integers(0, 10_000))
def test_p2g_conserves_mass_and_momentum(seed):
    cfg = SimConfig(gravity=(0.0, 0.0, 0.0))
    segs = [MaterialSegment(0, 5.0, 2.7)]
    state = _random_state(seed, segs, cfg)
    grid = particle_to_grid(state, segs, cfg, dt=0.0)
    p = state.particles
    assert grid.total_mass() == pytest.approx(p.mass.sum(), rel=1e-10)
    np.testing.assert_allclose(grid.total_momentum(), (p.mass[:, None] * p.v).sum(0),
                               rtol=1e-10, atol=1e-10 * np.abs(p.mass[:, None] * p.v).sum())


def test_free_flight_momentum_drift(free_config, soft_segment):
    p = beam((10, 4, 4))
    rng = np.random.default_rng(1)
    p.v = 0.05 * rng.normal(size=p.x.shape) + [0.2, 0.0, 0.0]
    state = init_state(p, soft_segment, free_config)
    traj = simulate(state, soft_segment, None, free_config, 5, record_full=True)
    mom = (state.particles.mass[:, None, None] * traj.v.transpose(1, 0, 2)).sum(0)
    ref = np.linalg.norm(mom[0])
    drift = np.linalg.norm(np.diff(mom, axis=0), axis=1) / ref
    assert drift.max() < 1e-8


def test_rigid_translation_keeps_identity_deformation(free_config, soft_segment):
    p = beam((8, 4, 4))
    p.v[:] = [0.1, -0.05, 0.02]
    state = init_state(p, soft_segment, free_config)
    for _ in range(10):
        state = step(state, soft_segment, None, free_config)
        dev = np.abs(state.particles.F - np.eye(3)).max()
        assert dev < 1e-8
    np.testing.assert_allclose(state.particles.v, [[0.1, -0.05, 0.02]] * p.n, atol=1e-10)


def test_translation_by_grid_cells_is_exact(soft_segment):
    """Shifting particles and domain by whole cells moves the trajectory rigidly."""
    cfg = SimConfig(dt=1e-4, substeps_per_frame=20, domain_min=(-0.2, -0.2, -0.2),
                    domain_max=(0.2, 0.2, 0.2))
    p = beam((10, 4, 4))
    shift = 3 * cfg.grid_spacing * np.array([1.0, -1.0, 2.0])
    cfg2 = cfg.with_(domain_min=tuple(np.array(cfg.domain_min) + shift),
                     domain_max=tuple(np.array(cfg.domain_max) + shift))
    p2 = p.copy()
    p2.x = p.x + shift
    a = simulate(init_state(p, soft_segment, cfg), soft_segment, None, cfg, 3).x
    b = simulate(init_state(p2, soft_segment, cfg2), soft_segment, None, cfg2, 3).x
    np.testing.assert_allclose(b - shift, a, atol=1e-9)


# ---------------------------------------------------------------- gravity, contact, failures

def test_gravity_compensation_holds_rest_shape(soft_segment):
    cfg = SimConfig(dt=1e-4, substeps_per_frame=100)
    p = beam((20, 5, 5))
    x0 = p.x.copy()
    on = simulate(init_state(p, soft_segment, cfg), soft_segment, None, cfg, 2).x
    off_cfg = cfg.with_(gravity_compensation=False)
    off = simulate(init_state(p, soft_segment, off_cfg), soft_segment, None, off_cfg, 2).x
    assert np.abs(on[-1] - x0).max() < 1e-9
    assert np.abs(off[-1] - x0).max() > 1e-4


def test_step_leaves_input_untouched(free_config, soft_segment):
    p = beam((6, 3, 3))
    p.v[:] = 0.1
    state = init_state(p, soft_segment, free_config)
    before = state.particles.x.copy()
    new = step(state, soft_segment, None, free_config)
    np.testing.assert_array_equal(state.particles.x, before)
    assert new.substep == 1 and not np.array_equal(new.particles.x, before)


def test_simulate_snapshot_count_and_frames(free_config, soft_segment):
    state = init_state(beam((6, 3, 3)), soft_segment, free_config, frame_index=4)
    traj = simulate(state, soft_segment, None, free_config, 3)
    assert traj.x.shape[0] == 4
    assert list(traj.frames) == [4, 5, 6, 7]
    with pytest.raises(DataError):
        traj.state_at(5)


def test_state_at_resumes_bitwise(soft_segment):
    cfg = SimConfig(dt=1e-4, substeps_per_frame=20)
    state = init_state(beam((10, 4, 4)), soft_segment, cfg.with_(gravity_compensation=False))
    cfg = cfg.with_(gravity_compensation=False)
    full = simulate(state, soft_segment, None, cfg, 4, record_full=True)
    tail = simulate(full.state_at(2), soft_segment, None, cfg, 2)
    np.testing.assert_array_equal(tail.x, full.x[2:])


def test_contact_particles_follow_rigid_targets():
    cfg = SimConfig(dt=1e-4, substeps_per_frame=50)
    segs = [MaterialSegment(0, 5.0, 2.7)]
    p = beam((20, 5, 5))
    near = select_near_set(p.x, (0.04, 0.0, 0.0), 0.006)
    T = 4
    xc = np.array([[0.04, 0.0, 0.002 * t] for t in range(T)])
    qc = np.tile([1.0, 0, 0, 0], (T, 1))
    contact = ContactTrajectory(xc, qc, near, 0.006, rest_positions=p.x[near])
    traj = simulate(init_state(p, segs, cfg, contact=contact), segs, contact, cfg, T - 1)
    targets = contact.targets()
    lag = np.linalg.norm(traj.x[:, near] - targets, axis=-1)
    # grid averaging with free neighbours makes the grasp lag; the spring keeps it bounded
    assert lag.max() < 0.5 * 0.002
    moved = (traj.x[-1, near] - p.x[near]).mean(0)
    np.testing.assert_allclose(moved, [0.0, 0.0, 0.006], atol=1e-3)


def test_contact_too_short_raises(soft_segment):
    cfg = SimConfig(dt=1e-4, substeps_per_frame=10)
    p = beam((10, 4, 4))
    near = select_near_set(p.x, (0.02, 0.0, 0.0), 0.004)
    contact = ContactTrajectory(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), near,
                                rest_positions=p.x[near])
    with pytest.raises(DataError):
        simulate(init_state(p, soft_segment, cfg, contact=contact), soft_segment, contact, cfg, 3)


def test_unstable_timestep_raises_numeric_error():
    cfg = SimConfig(dt=5e-3, substeps_per_frame=20, gravity_compensation=False)
    segs = [MaterialSegment(0, 8.0, 1.0)]
    p = beam((10, 4, 4))
    p.v = np.random.default_rng(0).normal(size=p.x.shape)
    with pytest.raises(NumericError) as info:
        simulate(init_state(p, segs, cfg), segs, None, cfg, 5)
    assert "frame" in str(info.value)


def test_preflight_warns_on_large_dt(caplog):
    segs = [MaterialSegment(0, 6.0, 2.0)]
    cfg = SimConfig(dt=1e-3)
    assert cfl_limit(segs, cfg) == pytest.approx(0.1 * 0.011 * (100.0 / 1e6) ** 0.5)
    with caplog.at_level("WARNING"):
        assert not preflight(segs, cfg)
    assert "CFL" in caplog.text
    assert preflight(segs, cfg.with_(dt=1e-7))


# ---------------------------------------------------------------- backends

_BACKEND_CHILD = r"""
import json, sys
import numpy as np
sys.path.insert(0, sys.argv[1])
from conftest import beam
from mmsysid import backend_name
from mmsysid.core import MaterialSegment, SimConfig
from mmsysid.mpm import init_state, simulate
cfg = SimConfig(dt=1e-4, substeps_per_frame=20)
segs = [MaterialSegment(0, 5.0, 2.7), MaterialSegment(1, 4.0, 2.5)]
p = beam((12, 4, 4), split=0.012)
p.v = 0.1 * np.random.default_rng(0).normal(size=p.x.shape)
x = simulate(init_state(p, segs, cfg), segs, None, cfg, 3).x
print(json.dumps({"backend": backend_name(), "x": x[-1].tolist()}))
"""


def _run_child(disable: bool):
    env = dict(os.environ, MMSYSID_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", _BACKEND_CHILD, os.path.dirname(__file__)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_numba_and_numpy_backends_agree():
    a, b = _run_child(False), _run_child(True)
    assert (a["backend"], b["backend"]) == ("numba", "numpy")
    np.testing.assert_allclose(np.array(a["x"]), np.array(b["x"]), rtol=0, atol=1e-10)
