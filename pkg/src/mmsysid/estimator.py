"""Analysis-by-synthesis estimation of per-segment Young's modulus and density.

Gradients of the simulation losses come from central finite differences in
log10 space; the probes are independent simulations and may run in a
process pool. The grouping regulariser has a closed-form gradient.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .contact import ContactTrajectory
from .core import MaterialSegment, ParticleSet, SimConfig, segment_index
from .errors import ConfigurationError, NumericError
from .io import _atomic_write
from .losses import (
    ObservationBundle,
    Renders,
    batch_ranges,
    combine_2d,
    init_states_from_tracks,
    loss_2d,
    loss_3d,
)
from .mpm import init_state, simulate
from .mpm.engine import SimState
from .segmentation import GroupingLoss, build_neighbourhood

log = logging.getLogger(__name__)

LOSS_KINDS = ("3D", "3D-full", "2D-full")
REFERENCE_SCHEDULE = ((5, 3), (10, 3), (15, 3), (25, 2))
REFERENCE_ITERATIONS = 150
MIN_BATCH_FRAMES = 5
OFFSET_UNIT = 1e-3          # offsets are optimised in millimetres


@dataclass
class Stage:
    batch_frames: int | None      # None = all training frames
    n_batches: int
    loss_kind: str
    iterations: int

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if self.n_batches < 1 or self.iterations < 0:
            raise ConfigurationError("stage needs n_batches >= 1 and iterations >= 0")


@dataclass
class EstimationPlan:
    stages: list[Stage]
    learning_rate: float = 0.1
    lr_decay: float = 0.5
    fd_step: float = 0.05
    grouping_weight: float = 1.0
    w_v: float = 1.0
    bounds_log10_E: tuple[float, float] = (2.0, 9.0)
    bounds_log10_rho: tuple[float, float] = (1.0, 4.0)
    bounds_offset: tuple[float, float] = (-5e-3, 5e-3)
    init_log10_E: float = 5.0
    init_log10_rho: float = math.log10(500.0)
    converge_rtol: float = 1e-5
    converge_window: int = 20
    max_halvings: int = 5
    fix_scale_gauge: bool = True
    freeze_density: bool = False    # hold log10_rho at its initial value (pins the scale instead)
    weights_2d: dict = field(default_factory=lambda: {"rgb": 0.1, "feature": 0.1, "dt": 1e-3})

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        sizes = [s.batch_frames for s in self.stages if s.batch_frames is not None]
        if any(b2 < b1 for b1, b2 in zip(sizes, sizes[1:])):
            raise ConfigurationError("stage batch sizes must be non-decreasing")
        if self.stages and self.stages[-1].batch_frames is not None:
            raise ConfigurationError("the final stage must use all frames")
        if not self.fd_step > 0:
            raise ConfigurationError("fd_step must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationPlan":
        d = dict(d)
        for k in ("bounds_log10_E", "bounds_log10_rho", "bounds_offset"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EstimationPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_plan(n_frames: int, iterations: int = REFERENCE_ITERATIONS) -> EstimationPlan:
    """Mini-batch schedule scaled from the 50-frame reference, then full-window stages."""
    scale = n_frames / 50.0
    stages = []
    for size, nb in REFERENCE_SCHEDULE:
        b = int(round(size * scale))
        if b >= MIN_BATCH_FRAMES and b * nb <= n_frames:
            stages.append(Stage(b, nb, "3D", iterations))
    if n_frames < 10:
        warnings.warn(f"{n_frames} frames is too few for mini-batching; using a reduced plan",
                      RuntimeWarning, stacklevel=2)
        stages = []
    stages += [Stage(None, 1, "3D-full", iterations), Stage(None, 1, "2D-full", iterations)]
    return EstimationPlan(stages)


# ---------------------------------------------------------------- parameter vector

def theta_from_segments(segments: Sequence[MaterialSegment]) -> np.ndarray:
    return np.array([[s.log10_E, s.log10_rho, s.boundary_offset / OFFSET_UNIT] for s in segments])


def segments_from_theta(theta, template: Sequence[MaterialSegment]) -> list[MaterialSegment]:
    th = np.asarray(theta, dtype=np.float64).reshape(len(template), 3)
    return [MaterialSegment(s.id, float(r[0]), float(r[1]), s.nu, float(r[2]) * OFFSET_UNIT)
            for s, r in zip(template, th)]


def clamp_theta(theta, plan: EstimationPlan) -> np.ndarray:
    th = np.array(theta, dtype=np.float64).reshape(-1, 3)
    th[:, 0] = np.clip(th[:, 0], *plan.bounds_log10_E)
    th[:, 1] = np.clip(th[:, 1], *plan.bounds_log10_rho)
    lo, hi = plan.bounds_offset
    th[:, 2] = np.clip(th[:, 2], lo / OFFSET_UNIT, hi / OFFSET_UNIT)
    return th


# ---------------------------------------------------------------- finite differences

@dataclass
class GradientResult:
    gradient: np.ndarray
    probes_plus: np.ndarray
    probes_minus: np.ndarray
    one_sided: list[int]


def fd_gradient(loss_fn: Callable[[np.ndarray], float], theta, h: float = 0.05, active=None,
                center_value: float | None = None, map_fn=map) -> GradientResult:
    """Central differences ``(L(t + h e_p) - L(t - h e_p)) / 2h`` per active coordinate.

    Probes go through ``map_fn`` so a process pool can evaluate them; the
    result is assembled in coordinate order and does not depend on it. A
    non-finite probe falls back to the one-sided difference with the centre.
    """
    th = np.asarray(theta, dtype=np.float64)
    flat = th.ravel()
    idx = np.arange(flat.size) if active is None else np.flatnonzero(np.asarray(active).ravel())
    probes = []
    for p in idx:
        for sign in (1.0, -1.0):
            q = flat.copy()
            q[p] += sign * h
            probes.append(q.reshape(th.shape))
    values = np.array(list(map_fn(loss_fn, probes)), dtype=np.float64)
    plus = np.full(flat.size, np.nan)
    minus = np.full(flat.size, np.nan)
    plus[idx] = values[0::2]
    minus[idx] = values[1::2]
    g = np.zeros(flat.size)
    one_sided = []
    for p in idx:
        lp, lm = plus[p], minus[p]
        if np.isfinite(lp) and np.isfinite(lm):
            g[p] = (lp - lm) / (2.0 * h)
            continue
        one_sided.append(int(p))
        if center_value is None:
            center_value = float(loss_fn(th))
        if np.isfinite(lp) and np.isfinite(center_value):
            g[p] = (lp - center_value) / h
        elif np.isfinite(lm) and np.isfinite(center_value):
            g[p] = (center_value - lm) / h
        else:
            g[p] = 0.0
    if one_sided:
        warnings.warn(f"non-finite loss at finite-difference probes for coordinates {one_sided}; "
                      "used one-sided differences", RuntimeWarning, stacklevel=2)
    return GradientResult(g.reshape(th.shape), plus.reshape(th.shape), minus.reshape(th.shape), one_sided)


# ---------------------------------------------------------------- problem

@dataclass
class EstimationProblem:
    """Immutable inputs shared by every loss evaluation (picklable for workers)."""

    particles: ParticleSet              # rest state with tentative segment labels
    segments: list[MaterialSegment]     # templates: ids and nu
    contact: ContactTrajectory | None
    config: SimConfig
    observations: ObservationBundle
    colors: np.ndarray | None = None
    render_features: np.ndarray | None = None
    background: tuple = (0.0, 0.0, 0.0)
    n_train: int | None = None

    def __post_init__(self):
        if self.n_train is None:
            self.n_train = self.observations.n_frames
        self._batch_cache: dict = {}

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_batch_cache"] = {}
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)

    @property
    def has_images(self) -> bool:
        return self.observations.has_images and self.colors is not None

    def batch_initial(self, t0: int) -> ParticleSet:
        """Rest state for frame 0, otherwise the track-derived state at ``t0``."""
        if t0 == 0:
            return self.particles
        if t0 not in self._batch_cache:
            obs = self.observations
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                b = init_states_from_tracks(obs.tracks, obs.track_ids, t0, obs.frame_dt,
                                            self.particles.x, first_frame=obs.first_frame)
            p = self.particles.copy()
            p.x, p.v, p.F, p.C = b.x, b.v, b.F, b.C
            self._batch_cache[t0] = p
        return self._batch_cache[t0]

    def simulate_window(self, segments, t0: int, t1: int, start: ParticleSet | None = None) -> np.ndarray:
        particles = self.batch_initial(t0) if start is None else start
        state = init_state(particles, segments, self.config, frame_index=t0, contact=self.contact)
        if t1 == t0:
            return state.particles.x[None].copy()
        return simulate(state, segments, self.contact, self.config, t1 - t0).x

    def windows(self, stage: Stage) -> list[tuple[int, int]]:
        if stage.batch_frames is None or stage.loss_kind != "3D":
            return [(0, self.n_train - 1)]
        return batch_ranges(stage.batch_frames, stage.n_batches)

    def loss_3d(self, segments, windows) -> float:
        obs = self.observations
        total = 0.0
        for t0, t1 in windows:
            xs = self.simulate_window(segments, t0, t1)
            total += loss_3d(xs, obs.tracks, obs.track_ids, obs.frame_slice(t0, t1))
        return total

    def render(self, positions, cameras):
        from .scene import Appearance, render_frames
        app = Appearance(cameras, self.colors, self.render_features, self.config.particle_spacing,
                         self.background)
        _, rgb, feats = render_frames(positions, app, want_features=self.render_features is not None)
        return rgb, feats

    def loss_2d(self, segments, weights) -> tuple[float, dict]:
        obs = self.observations
        xs = self.simulate_window(segments, 0, self.n_train - 1)
        rgb, feats = self.render(xs, obs.cameras)
        return loss_2d(Renders(xs, rgb, feats), obs, obs.frame_slice(0, self.n_train - 1), weights)

    def stage_loss(self, theta, stage: Stage, weights_2d=None) -> float:
        segments = segments_from_theta(theta, self.segments)
        try:
            if stage.loss_kind == "2D-full":
                return self.loss_2d(segments, weights_2d)[0]
            return self.loss_3d(segments, self.windows(stage))
        except NumericError as exc:
            log.debug("simulation failed at theta=%s: %s", np.asarray(theta).tolist(), exc)
            return math.inf


# process-pool plumbing: the problem is shipped once per worker
_WORKER: dict = {}


def _worker_init(problem, stage, weights_2d):
    _WORKER["problem"] = problem
    _WORKER["stage"] = stage
    _WORKER["weights"] = weights_2d


def _worker_loss(theta):
    return _WORKER["problem"].stage_loss(theta, _WORKER["stage"], _WORKER["weights"])


class _Evaluator:
    """Evaluates the stage loss serially or in a fixed-size process pool."""

    def __init__(self, problem: EstimationProblem, stage: Stage, weights_2d, workers: int):
        self.problem, self.stage, self.weights = problem, stage, weights_2d
        self.pool = None
        if workers > 1:
            ctx = mp.get_context("fork")
            self.pool = ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init,
                                            initargs=(problem, stage, weights_2d))

    def __call__(self, theta) -> float:
        return self.problem.stage_loss(theta, self.stage, self.weights)

    def map(self, fn, items):
        if self.pool is None:
            return [fn(t) for t in items]
        return list(self.pool.map(_worker_loss, items))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


# ---------------------------------------------------------------- optimisation

@dataclass
class StageResult:
    theta: np.ndarray
    best_loss: float
    loss_trace: list[float]
    theta_trace: list[list]
    iterations_run: int
    aborted: bool = False
    converged: bool = False


def _gauge_direction(active2d: np.ndarray) -> np.ndarray:
    u = np.zeros(active2d.shape)
    u[:, :2] = 1.0
    u *= active2d
    n = np.linalg.norm(u)
    return u / n if n > 0 else u


def optimize_stage(theta, stage: Stage, problem: EstimationProblem, plan: EstimationPlan, *,
                   lr: float | None = None, grouping: GroupingLoss | None = None,
                   workers: int = 1) -> StageResult:
    """Adam on stage loss + grouping_weight * L_g; returns the best iterate."""
    lr = plan.learning_rate if lr is None else lr
    th = clamp_theta(theta, plan)
    active = np.zeros(th.shape, dtype=bool)
    active[:, :2] = True
    if stage.loss_kind == "2D-full":
        active[:, 2] = True
    else:
        th[:, 2] = 0.0        # offsets carry no track information
    if plan.freeze_density:
        active[:, 1] = False
    gauge = _gauge_direction(active) if plan.fix_scale_gauge and not plan.freeze_density else None
    gw = plan.grouping_weight if grouping is not None else 0.0

    def reg(t):
        return gw * grouping.value(t[:, :2]) if gw else 0.0

    def reg_grad(t):
        g = np.zeros_like(t)
        if gw:
            g[:, :2] = gw * grouping.gradient(t[:, :2])
        return g

    ev = _Evaluator(problem, stage, plan.weights_2d, workers)
    m = np.zeros_like(th)
    v = np.zeros_like(th)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace, thetas = [], []
    best_th, best = th.copy(), math.inf
    halvings = 0
    aborted = converged = False
    it = 0
    try:
        center = ev(th)
        total = center + reg(th)
        while it < stage.iterations:
            if not math.isfinite(total):
                aborted = True
                break
            trace.append(total)
            thetas.append(th.tolist())
            if total < best:
                best, best_th = total, th.copy()
            w = plan.converge_window
            if len(trace) > w and abs(trace[-1 - w] - trace[-1]) <= plan.converge_rtol * abs(trace[-1 - w]):
                converged = True
                break
            grad = fd_gradient(ev, th, plan.fd_step, active=active, center_value=center,
                               map_fn=ev.map).gradient + reg_grad(th)
            grad[~active] = 0.0
            it += 1
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mhat = m / (1 - b1 ** it)
            vhat = v / (1 - b2 ** it)
            while True:
                step = -lr * mhat / (np.sqrt(vhat) + eps)
                step[~active] = 0.0
                if gauge is not None:
                    step -= np.sum(step * gauge) * gauge
                cand = clamp_theta(th + step, plan)
                c_center = ev(cand)
                if math.isfinite(c_center):
                    break
                halvings += 1
                lr *= 0.5
                log.warning("simulation blew up; halving learning rate to %.3g", lr)
                if halvings > plan.max_halvings:
                    aborted = True
                    break
            if aborted:
                break
            th, center = cand, c_center
            total = center + reg(th)
        else:
            if math.isfinite(total):
                trace.append(total)
                thetas.append(th.tolist())
                if total < best:
                    best, best_th = total, th.copy()
    finally:
        ev.close()
    if aborted:
        warnings.warn("stage aborted after repeated simulation failures; keeping best iterate",
                      RuntimeWarning, stacklevel=2)
    return StageResult(best_th, best, trace, thetas, it, aborted, converged)


# ---------------------------------------------------------------- driver

@dataclass
class EstimateResult:
    segments: list[MaterialSegment]
    report: dict


def initial_theta(segments: Sequence[MaterialSegment], plan: EstimationPlan) -> np.ndarray:
    th = np.zeros((len(segments), 3))
    th[:, 0] = plan.init_log10_E
    th[:, 1] = plan.init_log10_rho
    return th


def estimate(problem: EstimationProblem, plan: EstimationPlan | None = None, *, workers: int = 1,
             checkpoint_dir=None, theta0=None, resume: bool = False) -> EstimateResult:
    """Run the staged cascade; the report carries per-stage traces and final segments."""
    plan = default_plan(problem.n_train) if plan is None else plan
    t_start = time.perf_counter()
    grouping = None
    if problem.particles.z_D.shape[1] > 0 and plan.grouping_weight > 0:
        labels = segment_index(problem.segments, problem.particles.segment)
        grouping = GroupingLoss(labels, build_neighbourhood(problem.particles.z_D),
                                len(problem.segments), plan.w_v)
    th = initial_theta(problem.segments, plan) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    th = clamp_theta(th, plan)
    stages_out = []
    partial = False
    start_stage = 0
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if resume and ckpt is not None:
        done = sorted(ckpt.glob("stage_*.json"))
        if done:
            last = json.loads(done[-1].read_text())
            th = np.asarray(last["theta"])
            stages_out = last["stages"]
            start_stage = last["stage_index"] + 1
    for k in range(start_stage, len(plan.stages)):
        stage = plan.stages[k]
        if stage.loss_kind == "2D-full" and not problem.has_images:
            warnings.warn("observations carry no images; stopping after the 3D stages",
                          RuntimeWarning, stacklevel=2)
            partial = True
            break
        t0 = time.perf_counter()
        res = optimize_stage(th, stage, problem, plan, lr=plan.learning_rate * plan.lr_decay ** k,
                             grouping=grouping, workers=workers)
        th = res.theta
        entry = {
            "index": k,
            "loss_kind": stage.loss_kind,
            "batch_frames": stage.batch_frames,
            "n_batches": stage.n_batches,
            "iterations": stage.iterations,
            "iterations_run": res.iterations_run,
            "loss_trace": res.loss_trace,
            "best_loss": res.best_loss,
            "converged": res.converged,
            "aborted": res.aborted,
            "params": [s.to_dict() for s in segments_from_theta(th, problem.segments)],
            "wall_time_s": time.perf_counter() - t0,
        }
        stages_out.append(entry)
        if ckpt is not None:
            ckpt.mkdir(parents=True, exist_ok=True)
            blob = json.dumps({"stage_index": k, "theta": th.tolist(), "stages": stages_out}, indent=1)
            _atomic_write(ckpt / f"stage_{k:02d}.json", lambda f: f.write(blob.encode()))
    final = segments_from_theta(th, problem.segments)
    report = {
        "stages": stages_out,
        "final_segments": [s.to_dict() for s in final],
        "partial": partial,
        "plan": plan.to_dict(),
        "config": problem.config.to_dict(),
        "workers": workers,
        "gradient": "central finite differences in log10 space",
        "timing": {"wall_time_s": time.perf_counter() - t_start},
    }
    return EstimateResult(final, report)


def problem_from_bundle(bundle, with_images: bool = True, labels=None) -> EstimationProblem:
    """Estimator inputs from a scene container opened in estimation mode."""
    from .scene import observations, rest_particles, scene_config, scene_contact
    particles = rest_particles(bundle, labels)
    config = scene_config(bundle)
    nu = bundle.meta.get("spec", {}).get("nu", 0.3)
    seg_ids = np.unique(particles.segment)
    segments = [MaterialSegment(int(i), 5.0, math.log10(500.0), nu) for i in seg_ids]
    obs = observations(bundle, with_images=with_images)
    return EstimationProblem(
        particles=particles,
        segments=segments,
        contact=scene_contact(bundle),
        config=config,
        observations=obs,
        colors=bundle.get("particles/color"),
        render_features=bundle.get("particles/render_feature"),
        background=tuple(bundle.meta.get("background", (0.0, 0.0, 0.0))),
        n_train=obs.n_frames,
    )
