"""Domain types shared by every module, plus the two small material formulas."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, InvalidParameterError


@dataclass(frozen=True)
class SimConfig:
    grid_spacing: float = 0.011
    particle_spacing: float = 0.002
    dt: float = 1e-4
    substeps_per_frame: int = 333
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    bc_kappa: float = 100.0
    domain_min: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    domain_max: tuple[float, float, float] = (0.5, 0.5, 0.5)
    boundary_sharpness: float = 5e3
    volume_floor: float = 1e-4
    gravity_compensation: bool = True

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        object.__setattr__(self, "domain_min", tuple(float(g) for g in self.domain_min))
        object.__setattr__(self, "domain_max", tuple(float(g) for g in self.domain_max))
        object.__setattr__(self, "substeps_per_frame", int(self.substeps_per_frame))
        self.validate()

    @property
    def frame_dt(self) -> float:
        return self.dt * self.substeps_per_frame

    def validate(self) -> None:
        if not self.grid_spacing > 0:
            raise ConfigurationError("grid_spacing must be positive")
        if not self.particle_spacing > 0:
            raise ConfigurationError("particle_spacing must be positive")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.substeps_per_frame < 1:
            raise ConfigurationError("substeps_per_frame must be >= 1")
        if not self.bc_kappa > 0:
            raise ConfigurationError("bc_kappa must be positive")
        if len(self.gravity) != 3 or len(self.domain_min) != 3 or len(self.domain_max) != 3:
            raise ConfigurationError("gravity and domain bounds must be 3-vectors")
        if not all(lo < hi for lo, hi in zip(self.domain_min, self.domain_max)):
            raise ConfigurationError("domain_min must be < domain_max componentwise")
        if not self.boundary_sharpness > 0:
            raise ConfigurationError("boundary_sharpness must be positive")
        if not 0.0 < self.volume_floor < 1.0:
            raise ConfigurationError("volume_floor must lie in (0, 1)")

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_dt"] = self.frame_dt
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known - {"frame_dt"}
        if extra:
            raise ConfigurationError(f"unknown SimConfig keys: {sorted(extra)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known})


@dataclass
class MaterialSegment:
    id: int
    log10_E: float
    log10_rho: float
    nu: float = 0.3
    boundary_offset: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def E(self) -> float:
        return 10.0 ** self.log10_E

    @property
    def rho(self) -> float:
        return 10.0 ** self.log10_rho

    def validate(self) -> None:
        if not 0.0 < self.nu < 0.5:
            raise InvalidParameterError(f"segment {self.id}: Poisson ratio {self.nu} outside (0, 0.5)")
        for name in ("log10_E", "log10_rho", "boundary_offset"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"segment {self.id}: {name} is not finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialSegment":
        return cls(**d)


def segments_from_values(E: Sequence[float], rho: Sequence[float], nu: float = 0.3,
                         offsets: Sequence[float] | None = None) -> list[MaterialSegment]:
    offsets = [0.0] * len(E) if offsets is None else offsets
    return [MaterialSegment(i, math.log10(e), math.log10(r), nu, o)
            for i, (e, r, o) in enumerate(zip(E, rho, offsets))]


def lame_from_elastic(E, nu):
    """Lamé parameters ``(mu, lam)`` from Young's modulus and Poisson ratio.

    Accepts scalars or arrays. ``nu = 0`` is allowed here (degenerate but
    well defined); material segments themselves require ``nu`` in (0, 0.5).
    """
    E_arr = np.asarray(E, dtype=np.float64)
    nu_arr = np.asarray(nu, dtype=np.float64)
    if np.any(~(E_arr > 0)):
        raise InvalidParameterError("Young's modulus must be positive")
    if np.any(~((nu_arr >= 0) & (nu_arr < 0.5))):
        raise InvalidParameterError("Poisson ratio must lie in [0, 0.5)")
    mu = E_arr / (2.0 * (1.0 + nu_arr))
    lam = E_arr * nu_arr / ((1.0 + nu_arr) * (1.0 - 2.0 * nu_arr))
    if mu.ndim == 0:
        return float(mu), float(lam)
    return mu, lam


def particle_volume(d, offset, rest_volume, beta: float = 5e3, eps: float = 1e-4):
    """Effective simulation volume of particles near a soft object boundary.

    ``V = V_g * (sigmoid(-beta * (d + offset)) + eps)``; ``d`` is the signed
    distance to the tentative boundary (negative inside).
    """
    s = np.asarray(d, dtype=np.float64) + np.asarray(offset, dtype=np.float64)
    # sigmoid(-beta*s) written via tanh to stay finite for large |s|
    sig = 0.5 * (1.0 - np.tanh(0.5 * beta * s))
    out = np.asarray(rest_volume, dtype=np.float64) * (sig + eps)
    return float(out) if out.ndim == 0 else out


_PARTICLE_FIELDS = ("x", "v", "F", "C", "z_D", "z_A", "segment", "d",
                    "rest_volume", "volume", "mass", "bc_flag")


@dataclass
class ParticleSet:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    z_D: np.ndarray
    z_A: np.ndarray
    segment: np.ndarray
    d: np.ndarray
    rest_volume: np.ndarray
    volume: np.ndarray
    mass: np.ndarray
    bc_flag: np.ndarray

    @classmethod
    def at_rest(cls, x, segment, rest_volume, d=None, z_D=None, z_A=None) -> "ParticleSet":
        x = np.ascontiguousarray(x, dtype=np.float64)
        n = len(x)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        rest_volume = np.broadcast_to(np.asarray(rest_volume, dtype=np.float64), (n,)).copy()
        return cls(
            x=x,
            v=np.zeros((n, 3)),
            F=eye,
            C=np.zeros((n, 3, 3)),
            z_D=np.zeros((n, 0)) if z_D is None else np.asarray(z_D, dtype=np.float64),
            z_A=np.zeros((n, 0)) if z_A is None else np.asarray(z_A, dtype=np.float64),
            segment=np.asarray(segment, dtype=np.int32).copy(),
            d=np.full(n, -np.inf) if d is None else np.asarray(d, dtype=np.float64).copy(),
            rest_volume=rest_volume,
            volume=rest_volume.copy(),
            mass=np.zeros(n),
            bc_flag=np.zeros(n, dtype=bool),
        )

    @property
    def n(self) -> int:
        return len(self.x)

    def copy(self) -> "ParticleSet":
        return ParticleSet(**{k: getattr(self, k).copy() for k in _PARTICLE_FIELDS})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _PARTICLE_FIELDS}

    def apply_materials(self, segments: Sequence[MaterialSegment], config: SimConfig) -> None:
        """Recompute effective volume and mass from segment offsets and densities."""
        seg = _segment_lookup(segments, self.segment)
        offsets = np.array([s.boundary_offset for s in segments])[seg]
        rho = np.array([s.rho for s in segments])[seg]
        self.volume = particle_volume(self.d, offsets, self.rest_volume,
                                      config.boundary_sharpness, config.volume_floor)
        self.mass = rho * self.volume

    def validate(self, segments: Sequence[MaterialSegment] | None = None,
                 volume_floor: float = 1e-4) -> None:
        n = self.n
        shapes = {"x": (n, 3), "v": (n, 3), "F": (n, 3, 3), "C": (n, 3, 3)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DataError(f"particle array {name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("z_D", "z_A"):
            a = getattr(self, name)
            if a.ndim != 2 or a.shape[0] != n:
                raise DataError(f"particle array {name} must have shape (N, dim)")
        for name in ("segment", "d", "rest_volume", "volume", "mass", "bc_flag"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"particle array {name} must have length {n}")
        for name in ("x", "v", "F", "C"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"particle array {name} has non-finite entries")
        if segments is not None:
            _segment_lookup(segments, self.segment)
        det = np.linalg.det(self.F) if n else np.zeros(0)
        bad = np.flatnonzero(~(det > 0))
        if bad.size:
            raise DataError(f"det F <= 0 at particle {int(bad[0])}")
        if np.any(~(self.rest_volume > 0)):
            raise DataError("rest volumes must be positive")
        upper = self.rest_volume * (1.0 + volume_floor) * (1 + 1e-12)
        if np.any(~(self.volume > 0)) or np.any(self.volume > upper):
            raise DataError("effective volume outside (0, V_g (1 + eps)]")


def _segment_lookup(segments: Sequence[MaterialSegment], labels: np.ndarray) -> np.ndarray:
    """Map particle segment ids to positions in ``segments``."""
    ids = np.array([s.id for s in segments], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise DataError("duplicate segment ids")
    order = np.argsort(ids)
    pos = np.searchsorted(ids[order], labels)
    pos = np.clip(pos, 0, len(ids) - 1)
    found = ids[order][pos] == labels
    if not np.all(found):
        missing = int(np.asarray(labels)[~found][0])
        raise DataError(f"particle references unknown segment id {missing}")
    return order[pos]


def segment_index(segments: Sequence[MaterialSegment], labels: np.ndarray) -> np.ndarray:
    return _segment_lookup(segments, np.asarray(labels))


@dataclass
class GridField:
    mass: np.ndarray
    momentum: np.ndarray
    origin: np.ndarray
    shape: tuple[int, int, int] = field(default=(0, 0, 0))

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.mass.shape)

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def total_momentum(self) -> np.ndarray:
        return self.momentum.reshape(-1, 3).sum(axis=0)


def as_segments(items: Iterable) -> list[MaterialSegment]:
    return [s if isinstance(s, MaterialSegment) else MaterialSegment.from_dict(s) for s in items]
