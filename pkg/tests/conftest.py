from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmsysid.core import MaterialSegment, ParticleSet, SimConfig

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def lattice(counts, spacing=0.002, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    axes = [origin[d] + (np.arange(counts[d]) + 0.5) * spacing for d in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


def beam(counts=(20, 5, 5), spacing=0.002, origin=(0.0, -0.005, -0.005), split=None) -> ParticleSet:
    """A lattice beam; ``split`` puts particles with x > split into segment 1."""
    x = lattice(counts, spacing, origin)
    seg = np.zeros(len(x), dtype=np.int32) if split is None else (x[:, 0] > split).astype(np.int32)
    return ParticleSet.at_rest(x, seg, np.full(len(x), spacing ** 3))


@pytest.fixture
def free_config() -> SimConfig:
    return SimConfig(dt=1e-4, substeps_per_frame=10, gravity=(0.0, 0.0, 0.0),
                     domain_min=(-0.5, -0.5, -0.5), domain_max=(0.5, 0.5, 0.5))


@pytest.fixture
def soft_segment() -> list[MaterialSegment]:
    return [MaterialSegment(0, 5.0, np.log10(500.0))]


def screw_motion(n_frames=20, n_points=30, pitch=0.004, turn_deg=6.0, seed=0):
    """Rigid screw about the z axis through ``c0``: ground-truth contact poses plus point tracks."""
    from mmsysid import quat
    rng = np.random.default_rng(seed)
    c0 = np.array([0.05, 0.01, 0.02])
    rest = c0 + 0.006 * rng.normal(size=(n_points, 3))
    ang = np.deg2rad(turn_deg) * np.arange(n_frames)
    q = quat.from_axis_angle(np.tile([0.0, 0.0, 1.0], (n_frames, 1)), ang)
    R = quat.to_matrix(q)
    xc = c0 + np.outer(np.arange(n_frames) * pitch, [0.0, 0.0, 1.0])
    tracks = xc[:, None, :] + np.einsum("tab,nb->tna", R, rest - c0)
    return xc, q, rest, tracks


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])
