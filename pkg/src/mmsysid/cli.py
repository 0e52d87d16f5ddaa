"""``mmsysid`` command line: scene generation, simulation, estimation, prediction, evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend_name
from .core import MaterialSegment, SimConfig
from .errors import DataError, FormatError, MmsysidError, NumericError
from .io import SceneBundle, _atomic_write, read_bundle, write_bundle, write_pgm, write_ppm

log = logging.getLogger("mmsysid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_SCHEMA = "mmsysid.metrics/v1"
RESULT_KIND = "mmsysid.estimate/v1"
ENV_PREFIX = "MMSYSID_SIM_"
EVAL_SIZE = 256


class UsageError(MmsysidError):
    pass


# ---------------------------------------------------------------- helpers

def env_overrides(environ=None) -> dict:
    """Simulation config overrides from ``MMSYSID_SIM_<FIELD>`` variables (JSON values)."""
    environ = os.environ if environ is None else environ
    fields = set(SimConfig.__dataclass_fields__)
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in fields:
            raise UsageError(f"{key} does not name a simulation setting")
        try:
            out[name] = json.loads(raw)
        except ValueError:
            raise UsageError(f"{key} must hold a JSON value, got {raw!r}") from None
    return out


def parse_frames(text: str) -> tuple[int, int]:
    """Inclusive 1-based range ``a:b`` (or a single frame) -> 0-based (first, last)."""
    try:
        if ":" in text:
            a, b = (int(p) for p in text.split(":"))
        else:
            a = b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad frame range {text!r}; expected a:b") from None
    if a < 1 or b < a:
        raise argparse.ArgumentTypeError(f"bad frame range {text!r}")
    return a - 1, b - 1


def _versions() -> dict:
    import numba
    import scipy
    return {"mmsysid": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "backend": backend_name()}


def _write_json(path: Path, obj) -> None:
    blob = json.dumps(obj, indent=2, sort_keys=True).encode()
    _atomic_write(path, lambda f: f.write(blob))


def _segments_from_file(path) -> list[MaterialSegment]:
    data = json.loads(Path(path).read_text())
    items = data["final_segments"] if isinstance(data, dict) and "final_segments" in data else \
        data.get("segments", data) if isinstance(data, dict) else data
    try:
        return [MaterialSegment.from_dict(s) for s in items]
    except (TypeError, KeyError) as exc:
        raise FormatError(f"{path}: no material segments found") from exc


def _config_for(scene: SceneBundle) -> SimConfig:
    from .scene import scene_config
    cfg = scene_config(scene)
    over = env_overrides()
    return cfg.with_(**{k: tuple(v) if isinstance(v, list) else v for k, v in over.items()}) if over else cfg


class _Run:
    """Collects the RunManifest for one command."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.t0 = time.perf_counter()
        self.inputs, self.outputs = [], []
        self.config = None
        self.extra_timing = {}

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "argv": self.args.argv,
            "seed": getattr(self.args, "seed", None),
            "workers": getattr(self.args, "workers", 1),
            "inputs": [str(p) for p in self.inputs],
            "outputs": [str(p) for p in self.outputs],
            "config": self.config,
            "versions": _versions(),
            "timing": {"wall_time_s": time.perf_counter() - self.t0, **self.extra_timing},
        }

    def finish(self, primary: Path) -> None:
        _write_json(Path(str(primary) + ".manifest.json"), self.manifest())


def _skip(args, out: Path) -> bool:
    if args.skip_existing and out.exists():
        log.info("%s exists; skipping", out)
        return True
    return False


# ---------------------------------------------------------------- commands

def cmd_gen_scene(args) -> int:
    from .scene import SyntheticSceneSpec, branching_spec, cantilever_spec, gen_scene, twin_beam_spec
    out = Path(args.output)
    if _skip(args, out):
        return EXIT_OK
    run = _Run(args, "gen-scene")
    run.inputs.append(args.spec)
    try:
        raw = json.loads(Path(args.spec).read_text())
    except ValueError as exc:
        raise FormatError(f"{args.spec}: not valid JSON") from exc
    presets = {"cantilever": cantilever_spec, "twin_beam": twin_beam_spec, "branching": branching_spec}
    if "preset" in raw:
        if raw["preset"] not in presets:
            raise UsageError(f"unknown preset {raw['preset']!r}; choose from {sorted(presets)}")
        spec = presets[raw["preset"]](**raw.get("overrides", {}))
    else:
        spec = SyntheticSceneSpec.from_dict(raw)
    seed = args.seed if args.seed is not None else spec.seed
    spec = SyntheticSceneSpec.from_dict({**spec.to_dict(), "seed": seed})
    args.seed = seed
    bundle = gen_scene(spec)
    write_bundle(bundle, out)
    run.config = bundle.meta["config"]
    run.outputs.append(out)
    run.finish(out)
    return EXIT_OK


def _simulate_frames(scene: SceneBundle, segments, last: int, config: SimConfig):
    """Positions for 0-based frames ``0..last`` simulated from rest."""
    from .mpm import init_state, simulate
    from .scene import rest_particles, scene_contact
    contact = scene_contact(scene)
    if contact is not None and contact.n_frames <= last:
        raise DataError(f"contact script covers {contact.n_frames} frames, {last + 1} requested")
    state = init_state(rest_particles(scene), segments, config, contact=contact)
    return simulate(state, segments, contact, config, last).x


def cmd_simulate(args) -> int:
    from .scene import trajectory_bundle, truth_segments
    out = Path(args.output)
    if _skip(args, out):
        return EXIT_OK
    run = _Run(args, "simulate")
    scene = read_bundle(args.scene, mode="oracle")
    run.inputs.append(args.scene)
    if args.params is not None:
        segments = _segments_from_file(args.params)
        run.inputs.append(args.params)
    else:
        segments = truth_segments(scene)
        if scene.get("truth/labels") is not None:
            scene["particles/segment"] = scene["truth/labels"]
    config = _config_for(scene)
    run.config = config.to_dict()
    xs = _simulate_frames(scene, segments, args.frames - 1, config)
    traj = trajectory_bundle(scene, xs, range(args.frames), {"segments": [s.to_dict() for s in segments]})
    write_bundle(traj, out)
    run.outputs.append(out)
    run.finish(out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .estimator import EstimationPlan, estimate, problem_from_bundle
    out = Path(args.output)
    if _skip(args, out):
        return EXIT_OK
    run = _Run(args, "estimate")
    scene = read_bundle(args.scene, mode="estimation", required=("obs/tracks", "obs/track_ids"))
    run.inputs.append(args.scene)
    problem = problem_from_bundle(scene, with_images=not args.no_images)
    problem.config = _config_for(scene)
    plan = None
    if args.plan is not None:
        plan = EstimationPlan.load(args.plan)
        run.inputs.append(args.plan)
    ckpt = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    result = estimate(problem, plan, workers=args.workers, checkpoint_dir=ckpt, resume=args.resume)
    report = json.loads(json.dumps(result.report))
    # wall times live in the manifest so the result file itself is reproducible byte for byte
    report.pop("timing", None)
    run.extra_timing["stages_s"] = [st.pop("wall_time_s", None) for st in report["stages"]]
    report["kind"] = RESULT_KIND
    # identify the input by content; its path is in the manifest
    report["scene_hash"] = scene.payload_digest()
    run.config = problem.config.to_dict()
    _write_json(out, report)
    run.outputs.append(out)
    run.finish(out)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .scene import trajectory_bundle
    out = Path(args.output)
    if _skip(args, out):
        return EXIT_OK
    run = _Run(args, "predict")
    scene = read_bundle(args.scene, mode="estimation")
    segments = _segments_from_file(args.result)
    run.inputs += [args.scene, args.result]
    first, last = args.frames
    config = _config_for(scene)
    run.config = config.to_dict()
    xs = _simulate_frames(scene, segments, last, config)
    traj = trajectory_bundle(scene, xs[first:last + 1], range(first, last + 1),
                             {"segments": [s.to_dict() for s in segments]})
    write_bundle(traj, out)
    run.outputs.append(out)
    run.finish(out)
    return EXIT_OK


def _trajectory_frames(bundle: SceneBundle, frames0: list[int]):
    """Positions for 0-based ``frames0`` from a trajectory bundle or an oracle scene."""
    from .scene import SCENE_KIND, TRAJECTORY_KIND
    kind = bundle.meta.get("kind")
    if kind == TRAJECTORY_KIND:
        have = [f - 1 for f in bundle.meta["frames"]]
        rows = []
        for f in frames0:
            if f not in have:
                raise DataError(f"trajectory has no frame {f + 1}")
            rows.append(have.index(f))
        return bundle["trajectory/x"][rows]
    if kind == SCENE_KIND:
        x = bundle["truth/x"]
        if max(frames0) >= len(x):
            raise DataError(f"scene truth has {len(x)} frames, frame {max(frames0) + 1} requested")
        return x[frames0]
    raise FormatError(f"unsupported bundle kind {kind!r}")


def evaluate_trajectories(pred: SceneBundle, truth: SceneBundle, size: int = EVAL_SIZE) -> dict:
    """Per-frame IoU, chamfer distance (px) and PSNR (dB) at ``size`` x ``size``, averaged over views."""
    from .render import Camera, chamfer2d, iou, psnr
    from .scene import Appearance, render_frames
    frames0 = [f - 1 for f in pred.meta["frames"]]
    xp = pred["trajectory/x"]
    xt = _trajectory_frames(truth, frames0)
    if xp.shape != xt.shape:
        raise DataError(f"trajectory shapes differ: {xp.shape} vs {xt.shape}")
    cams = [Camera.from_dict(c) for c in pred.meta["cameras"]]
    spacing = SimConfig.from_dict(pred.meta["config"]).particle_spacing
    app = Appearance(cams, pred["particles/color"], pred["particles/render_feature"], spacing,
                     tuple(pred.meta["background"])).scaled(size)
    mp_, rp, _ = render_frames(xp, app, want_features=False)
    mt, rt, _ = render_frames(xt, app, want_features=False)
    rows = []
    for k, f in enumerate(frames0):
        ious, cds, ps = [], [], []
        for c in range(len(cams)):
            ious.append(iou(mp_[k, c], mt[k, c]))
            cds.append(chamfer2d(mp_[k, c], mt[k, c]))
            ps.append(psnr(rp[k, c], rt[k, c]))
        rows.append({"frame": f + 1, "iou": float(np.mean(ious)), "chamfer_px": float(np.mean(cds)),
                     "psnr_db": float(np.mean(ps))})
    return {
        "schema": METRICS_SCHEMA,
        "image_size": [size, size],
        "n_views": len(cams),
        "frames": rows,
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in ("iou", "chamfer_px", "psnr_db")},
    }


def cmd_evaluate(args) -> int:
    out = Path(args.output)
    if _skip(args, out):
        return EXIT_OK
    run = _Run(args, "evaluate")
    pred = read_bundle(args.pred, mode="estimation")
    truth = read_bundle(args.truth, mode="oracle")
    run.inputs += [args.pred, args.truth]
    metrics = evaluate_trajectories(pred, truth, args.size)
    run.config = pred.meta.get("config")
    _write_json(out, metrics)
    run.outputs.append(out)
    run.finish(out)
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import Camera
    from .scene import Appearance, render_frames
    outdir = Path(args.output)
    traj = read_bundle(args.trajectory, mode="estimation")
    cams = [Camera.from_dict(c) for c in traj.meta["cameras"]]
    if not 0 <= args.view < len(cams):
        raise UsageError(f"--view must be in [0, {len(cams) - 1}]")
    if _skip(args, outdir / "manifest.json"):
        return EXIT_OK
    run = _Run(args, "render")
    run.inputs.append(args.trajectory)
    spacing = SimConfig.from_dict(traj.meta["config"]).particle_spacing
    app = Appearance([cams[args.view]], traj["particles/color"], traj["particles/render_feature"], spacing,
                     tuple(traj.meta["background"]))
    if args.size:
        app = app.scaled(args.size)
    masks, rgb, _ = render_frames(traj["trajectory/x"], app, want_features=False)
    for k, f in enumerate(traj.meta["frames"]):
        write_ppm(outdir / f"frame_{f:04d}.ppm", rgb[k, 0])
        write_pgm(outdir / f"mask_{f:04d}.pgm", masks[k, 0])
        run.outputs += [outdir / f"frame_{f:04d}.ppm", outdir / f"mask_{f:04d}.pgm"]
    run.finish(outdir / "manifest")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: the scene file's seed, else 0)")
    common.add_argument("--workers", type=int, default=1, help="process pool size for probe simulations")
    common.add_argument("--skip-existing", action="store_true", help="do nothing if the output exists")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmsysid", description="Multi-material physical parameter estimation.")
    p.add_argument("--version", action="version", version=f"mmsysid {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="build an oracle scene from a spec JSON")
    s.add_argument("spec")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("simulate", parents=[common], help="simulate a scene from rest")
    s.add_argument("scene")
    s.add_argument("--frames", type=int, required=True, help="number of frames including the rest frame")
    s.add_argument("--params", help="JSON with material segments (default: the scene's true ones)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="estimate per-segment materials")
    s.add_argument("scene")
    s.add_argument("--plan", help="estimation plan JSON (default: the standard schedule)")
    s.add_argument("--no-images", action="store_true", help="ignore image observations")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("predict", parents=[common], help="simulate estimated materials over a frame range")
    s.add_argument("scene")
    s.add_argument("result")
    s.add_argument("--frames", type=parse_frames, default=parse_frames("51:80"), help="inclusive range a:b")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", parents=[common], help="IoU / chamfer / PSNR of a predicted trajectory")
    s.add_argument("pred")
    s.add_argument("truth", help="trajectory bundle or oracle scene")
    s.add_argument("--size", type=int, default=EVAL_SIZE)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", parents=[common], help="write PPM frames and PGM masks for one view")
    s.add_argument("trajectory")
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--size", type=int, default=0, help="square output size (default: camera size)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_render)
    return p


def _error(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        return _error("numeric", exc, EXIT_NUMERIC)
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        return _error("data", exc, EXIT_DATA)
    except (MmsysidError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        return _error("usage", exc, EXIT_USAGE)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
