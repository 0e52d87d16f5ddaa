"""Multi-material elastic system identification with MLS-MPM."""

from ._accel import backend_name
from .core import MaterialSegment, ParticleSet, SimConfig, lame_from_elastic, particle_volume

__version__ = "0.1.0"

__all__ = ["MaterialSegment", "ParticleSet", "SimConfig", "backend_name",
           "lame_from_elastic", "particle_volume", "__version__"]
