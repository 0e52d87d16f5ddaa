from .engine import (
    SimState,
    Trajectory,
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

__all__ = [
    "SimState", "Trajectory", "bspline_weights", "cfl_limit", "corotated_stress",
    "gravity_external_force", "init_state", "particle_to_grid", "polar_rotation",
    "preflight", "simulate", "step",
]
