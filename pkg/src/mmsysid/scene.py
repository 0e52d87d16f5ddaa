"""Synthetic oracle scenes: geometry, features, cameras, contact script, observations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import quat
from .contact import DEFAULT_GRASP_RADIUS, ContactTrajectory, select_near_set
from .core import MaterialSegment, ParticleSet, SimConfig, segments_from_values
from .errors import ConfigurationError, DataError, NumericError
from .io import SceneBundle
from .losses import ObservationBundle, distance_maps_from_masks
from .mpm import init_state, simulate
from .render import Camera, camera_ring, default_radii, splat
from .segmentation import oversegment

SCENE_KIND = "mmsysid.scene/v1"
TRAJECTORY_KIND = "mmsysid.trajectory/v1"
FEATURE_DIM_D = 16
FEATURE_DIM_A = 8
RENDER_FEATURE_DIM = 3


@dataclass
class PartSpec:
    name: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    E: float
    rho: float
    nu: float = 0.3
    color: tuple[float, float, float] = (0.8, 0.8, 0.8)
    feature_group: int | None = None      # parts sharing a group share the z_D centre
    affinity_group: int | None = None     # same for z_A

    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass
class ContactScript:
    """Rigid grasp motion through keyframes ``{frame (1-based), translation, axis, angle_deg}``."""

    grasp_point: tuple[float, float, float]
    waypoints: list[dict] = field(default_factory=list)
    grasp_radius: float = DEFAULT_GRASP_RADIUS

    def poses(self, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
        keys = sorted(self.waypoints, key=lambda w: w["frame"])
        if not keys or keys[0]["frame"] != 1:
            keys = [{"frame": 1, "translation": [0, 0, 0], "axis": [0, 0, 1], "angle_deg": 0.0}] + keys
        frames = np.array([k["frame"] - 1 for k in keys], dtype=np.float64)
        trans = np.array([k.get("translation", [0, 0, 0]) for k in keys], dtype=np.float64)
        qs = np.array([quat.from_axis_angle(k.get("axis", [0, 0, 1]), math.radians(k.get("angle_deg", 0.0)))
                       for k in keys])
        qs = quat.make_sign_consistent(qs)
        x = np.empty((n_frames, 3))
        q = np.empty((n_frames, 4))
        for t in range(n_frames):
            j = int(np.searchsorted(frames, t, side="right")) - 1
            if j >= len(frames) - 1:
                x[t], q[t] = trans[-1], qs[-1]
                continue
            s = (t - frames[j]) / (frames[j + 1] - frames[j])
            # smoothstep keeps the grasp velocity continuous at keyframes
            s = s * s * (3.0 - 2.0 * s)
            x[t] = (1 - s) * trans[j] + s * trans[j + 1]
            q[t] = _slerp(qs[j], qs[j + 1], s)
        return np.asarray(self.grasp_point) + x, q


def _slerp(a, b, s):
    d = float(np.dot(a, b))
    if d > 0.9995:
        return quat.normalize((1 - s) * a + s * b)
    th = math.acos(min(1.0, d))
    return (math.sin((1 - s) * th) * a + math.sin(s * th) * b) / math.sin(th)


@dataclass
class SyntheticSceneSpec:
    kind: str
    parts: list[PartSpec]
    contact: ContactScript
    feature_noise: float = 0.02
    track_noise: float = 0.0
    track_fraction: float = 1.0
    n_cameras: int = 4
    camera_radius: float = 0.25
    camera_elevation_deg: float = 30.0
    camera_target: tuple[float, float, float] | None = None
    image_size: int = 128
    focal: float = 200.0            # at ``image_size``
    background: tuple[float, float, float] = (0.1, 0.1, 0.12)
    n_frames: int = 80
    n_train: int = 50
    granularity: int = 8
    nu: float = 0.3
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.parts = [p if isinstance(p, PartSpec) else PartSpec(**p) for p in self.parts]
        if not isinstance(self.contact, ContactScript):
            self.contact = ContactScript(**self.contact)
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("cantilever", "branching"):
            raise ConfigurationError(f"unknown geometry kind {self.kind!r}")
        if not self.parts:
            raise ConfigurationError("scene needs at least one part")
        for p in self.parts:
            if not (p.E > 0 and p.rho > 0):
                raise ConfigurationError(f"part {p.name}: materials must be positive")
            if not all(h > l for l, h in zip(p.lo, p.hi)):
                raise ConfigurationError(f"part {p.name}: empty box")
        for i, a in enumerate(self.parts):
            for b in self.parts[i + 1:]:
                overlap = [min(a.hi[d], b.hi[d]) - max(a.lo[d], b.lo[d]) for d in range(3)]
                if all(o > 1e-12 for o in overlap):
                    raise ConfigurationError(f"parts {a.name} and {b.name} overlap")
        if not 1 <= self.n_train <= self.n_frames:
            raise ConfigurationError("n_train must lie in [1, n_frames]")

    def sim_config(self) -> SimConfig:
        return SimConfig.from_dict(self.config) if self.config else SimConfig()

    def true_segments(self) -> list[MaterialSegment]:
        return segments_from_values([p.E for p in self.parts], [p.rho for p in self.parts], nu=self.nu)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        return cls(**d)


# ---------------------------------------------------------------- preset scenes

_BEAM_CONFIG = {"dt": 1.25e-4, "substeps_per_frame": 80, "domain_min": [0.0, -0.15, -0.15],
                "domain_max": [0.3, 0.15, 0.15]}


def cantilever_spec(**overrides) -> SyntheticSceneSpec:
    """Stiff base half clamped at the x = 0 wall, soft tip half grasped and bent."""
    h = 0.005
    base = dict(
        kind="cantilever",
        parts=[
            PartSpec("base", (0.0, -h, -h), (0.05, h, h), 1e6, 800.0, color=(0.75, 0.45, 0.2)),
            PartSpec("tip", (0.05, -h, -h), (0.10, h, h), 1e4, 300.0, color=(0.25, 0.7, 0.3)),
        ],
        contact=ContactScript((0.1, 0.0, 0.0), [
            {"frame": 1, "translation": [0, 0, 0]},
            {"frame": 25, "translation": [-0.01, 0.0, 0.03], "axis": [0, 1, 0], "angle_deg": -30.0},
            {"frame": 50, "translation": [-0.005, 0.025, 0.01], "axis": [0, 0, 1], "angle_deg": 20.0},
            {"frame": 80, "translation": [-0.01, -0.02, 0.025], "axis": [0, 1, 0], "angle_deg": -20.0},
        ], grasp_radius=0.012),
        camera_target=(0.06, 0.0, 0.01),
        config=dict(_BEAM_CONFIG),
    )
    base.update(overrides)
    return SyntheticSceneSpec(**base)


def twin_beam_spec(**overrides) -> SyntheticSceneSpec:
    """Three-part beam; the two soft parts share material and DINO-like features.

    The grasp swallows the whole short tip part, so its material shows up in
    the tracks only through the few grid nodes it shares with the middle part.
    The twins hold most of the particles, which keeps the variance term of the
    grouping loss from dragging them towards the short base.
    """
    h = 0.005
    base = dict(
        kind="cantilever",
        parts=[
            PartSpec("base", (0.0, -h, -h), (0.02, h, h), 3e5, 700.0, color=(0.75, 0.45, 0.2),
                     feature_group=0, affinity_group=0),
            PartSpec("mid", (0.02, -h, -h), (0.09, h, h), 3e4, 400.0, color=(0.25, 0.7, 0.3),
                     feature_group=1, affinity_group=1),
            PartSpec("tip", (0.09, -h, -h), (0.10, h, h), 3e4, 400.0, color=(0.3, 0.6, 0.75),
                     feature_group=1, affinity_group=2),
        ],
        contact=ContactScript((0.1, 0.0, 0.0), [
            {"frame": 1, "translation": [0, 0, 0]},
            {"frame": 20, "translation": [-0.01, 0.0, 0.03], "axis": [0, 1, 0], "angle_deg": -30.0},
            {"frame": 40, "translation": [-0.005, 0.025, 0.01], "axis": [0, 0, 1], "angle_deg": 20.0},
        ], grasp_radius=0.016),
        camera_target=(0.06, 0.0, 0.01),
        n_frames=40, n_train=40,
        config=dict(_BEAM_CONFIG),
    )
    base.update(overrides)
    return SyntheticSceneSpec(**base)


def branching_spec(**overrides) -> SyntheticSceneSpec:
    """Stem, leaf and petal analogues on one clamped stem."""
    base = dict(
        kind="branching",
        parts=[
            PartSpec("stem", (0.0, -0.004, -0.004), (0.08, 0.004, 0.004), 1e6, 700.0, color=(0.3, 0.55, 0.2)),
            PartSpec("leaf", (0.03, 0.004, -0.002), (0.05, 0.034, 0.002), 5e4, 400.0, color=(0.2, 0.75, 0.25)),
            PartSpec("petal", (0.08, -0.01, -0.01), (0.1, 0.01, 0.01), 2e4, 250.0, color=(0.85, 0.3, 0.5)),
        ],
        contact=ContactScript((0.09, 0.0, 0.0), [
            {"frame": 1, "translation": [0, 0, 0]},
            {"frame": 30, "translation": [0.0, 0.0, 0.02]},
        ]),
        camera_target=(0.05, 0.01, 0.0),
        config=dict(_BEAM_CONFIG),
    )
    base.update(overrides)
    return SyntheticSceneSpec(**base)


# ---------------------------------------------------------------- seeding

def seed_particles(spec: SyntheticSceneSpec, config: SimConfig):
    """Lattice particles per part, part labels, and signed distance to the surface."""
    sp = config.particle_spacing
    xs, labels = [], []
    for k, part in enumerate(spec.parts):
        lo = np.asarray(part.lo)
        counts = np.maximum(np.round((np.asarray(part.hi) - lo) / sp).astype(int), 1)
        axes = [lo[d] + (np.arange(counts[d]) + 0.5) * sp for d in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        xs.append(g)
        labels.append(np.full(len(g), k, dtype=np.int32))
    x = np.concatenate(xs)
    labels = np.concatenate(labels)
    return x, labels, signed_distance(x, sp)


def signed_distance(x, spacing: float) -> np.ndarray:
    """Negative distance from each particle to the object surface.

    Empty lattice sites next to the object are found by probing one spacing
    along each axis; the surface lies half a spacing in front of them.
    """
    tree = cKDTree(x)
    probes = (x[:, None, :] + spacing * np.concatenate([np.eye(3), -np.eye(3)])[None]).reshape(-1, 3)
    gap, _ = tree.query(probes, k=1)
    empty = np.unique(np.round(probes[gap > 0.5 * spacing] / (1e-3 * spacing)).astype(np.int64), axis=0)
    empty = empty * (1e-3 * spacing)
    dist, _ = cKDTree(empty).query(x, k=1)
    return -(dist - 0.5 * spacing)


def make_features(spec: SyntheticSceneSpec, labels, rng):
    n_parts = len(spec.parts)
    fg = [p.feature_group if p.feature_group is not None else k for k, p in enumerate(spec.parts)]
    ag = [p.affinity_group if p.affinity_group is not None else k for k, p in enumerate(spec.parts)]
    centres_D = rng.normal(size=(max(fg) + 1, FEATURE_DIM_D))
    centres_D /= np.linalg.norm(centres_D, axis=1, keepdims=True)
    centres_A = rng.normal(size=(max(ag) + 1, FEATURE_DIM_A))
    centres_A /= np.linalg.norm(centres_A, axis=1, keepdims=True)
    n = len(labels)
    z_D = centres_D[np.array(fg)[labels]] + spec.feature_noise * rng.normal(size=(n, FEATURE_DIM_D))
    z_A = centres_A[np.array(ag)[labels]] + spec.feature_noise * rng.normal(size=(n, FEATURE_DIM_A))
    del n_parts
    return z_D, z_A


def render_feature_basis(z_D) -> np.ndarray:
    """Projection of z_D onto its leading principal axes, used for feature maps."""
    c = z_D - z_D.mean(0)
    _, _, Vt = np.linalg.svd(c, full_matrices=False)
    basis = Vt[:RENDER_FEATURE_DIM].T
    # fix the sign so the basis is reproducible
    basis *= np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(basis.shape[1])])
    return basis


# ---------------------------------------------------------------- rendering

@dataclass
class Appearance:
    cameras: list[Camera]
    colors: np.ndarray            # (N, 3)
    render_features: np.ndarray   # (N, C)
    particle_spacing: float
    background: tuple[float, float, float]

    def scaled(self, size: int) -> "Appearance":
        return Appearance([scale_camera(c, size) for c in self.cameras], self.colors,
                          self.render_features, self.particle_spacing, self.background)


def scale_camera(cam: Camera, size: int) -> Camera:
    f = size / cam.width
    return Camera(cam.fx * f, cam.fy * f, (size - 1) / 2.0 + (cam.cx - (cam.width - 1) / 2.0) * f,
                  (size - 1) / 2.0 + (cam.cy - (cam.height - 1) / 2.0) * f,
                  cam.rotation, cam.translation, size, int(round(cam.height * f)))


def render_frames(positions, appearance: Appearance, want_features: bool = True):
    """Masks, RGB and feature images for positions ``(T, N, 3)`` in every view."""
    T = positions.shape[0]
    V = len(appearance.cameras)
    H, W = appearance.cameras[0].height, appearance.cameras[0].width
    masks = np.zeros((T, V, H, W), dtype=bool)
    rgb = np.zeros((T, V, H, W, 3))
    feats = np.zeros((T, V, H, W, appearance.render_features.shape[1])) if want_features else None
    values = np.concatenate([appearance.colors, appearance.render_features], axis=1)
    bg = np.concatenate([np.asarray(appearance.background), np.zeros(appearance.render_features.shape[1])])
    for t in range(T):
        for c, cam in enumerate(appearance.cameras):
            pc = positions[t] @ cam.rotation.T + cam.translation
            radii = default_radii(cam, pc[:, 2], appearance.particle_spacing)
            img, cover, _ = splat(positions[t], values, radii, cam, background=bg)
            masks[t, c] = cover
            rgb[t, c] = img[..., :3]
            if want_features:
                feats[t, c] = img[..., 3:]
    return masks, rgb, feats


# ---------------------------------------------------------------- scene generation

def gen_scene(spec: SyntheticSceneSpec) -> SceneBundle:
    """Build the oracle scene, run it with true materials and bake observations."""
    config = spec.sim_config()
    rng = np.random.default_rng(spec.seed)
    x, labels, d = seed_particles(spec, config)
    z_D, z_A = make_features(spec, labels, rng)
    colors = np.array([spec.parts[k].color for k in labels], dtype=np.float64)
    basis = render_feature_basis(z_D)
    near = select_near_set(x, spec.contact.grasp_point, spec.contact.grasp_radius)
    xc, qc = spec.contact.poses(spec.n_frames)
    contact = ContactTrajectory(xc, qc, near, spec.contact.grasp_radius, rest_positions=x[near])
    target = spec.camera_target if spec.camera_target is not None else tuple(x.mean(0))
    cams = camera_ring(target, spec.camera_radius, spec.n_cameras, elevation_deg=spec.camera_elevation_deg,
                       focal=spec.focal, size=spec.image_size)
    tentative = oversegment(z_D, z_A, spec.granularity)

    bundle = SceneBundle(meta={
        "kind": SCENE_KIND,
        "spec": spec.to_dict(),
        "config": config.to_dict(),
        "cameras": [c.to_dict() for c in cams],
        "contact": contact.to_dict(),
        "n_frames": spec.n_frames,
        "n_train": spec.n_train,
        "background": list(spec.background),
        "truth": {"segments": [s.to_dict() for s in spec.true_segments()]},
    })
    bundle["particles/x"] = x
    bundle["particles/d"] = d
    bundle["particles/rest_volume"] = np.full(len(x), config.particle_spacing ** 3)
    bundle["particles/z_D"] = z_D
    bundle["particles/z_A"] = z_A
    bundle["particles/color"] = colors
    bundle["particles/render_feature"] = z_D @ basis
    bundle["particles/segment"] = tentative.astype(np.int32)
    bundle["truth/labels"] = labels
    bake_observations(bundle, spec.true_segments(), config, rng=rng)
    return bundle


def rest_particles(bundle: SceneBundle, labels=None) -> ParticleSet:
    x = bundle["particles/x"]
    seg = bundle["particles/segment"] if labels is None else labels
    return ParticleSet.at_rest(x, seg, bundle["particles/rest_volume"], d=bundle["particles/d"],
                               z_D=bundle["particles/z_D"], z_A=bundle["particles/z_A"])


def scene_config(bundle: SceneBundle) -> SimConfig:
    return SimConfig.from_dict(bundle.meta["config"])


def scene_contact(bundle: SceneBundle) -> ContactTrajectory:
    return ContactTrajectory.from_dict(bundle.meta["contact"])


def scene_cameras(bundle: SceneBundle) -> list[Camera]:
    return [Camera.from_dict(c) for c in bundle.meta["cameras"]]


def scene_appearance(bundle: SceneBundle) -> Appearance:
    return Appearance(scene_cameras(bundle), bundle["particles/color"], bundle["particles/render_feature"],
                      scene_config(bundle).particle_spacing, tuple(bundle.meta["background"]))


def truth_segments(bundle: SceneBundle) -> list[MaterialSegment]:
    return [MaterialSegment.from_dict(s) for s in bundle.truth["segments"]]


def oracle_trajectory(bundle: SceneBundle, segments, n_frames: int, labels=None):
    """Positions for 0-based frames ``0..n_frames-1`` under ``segments``."""
    config = scene_config(bundle)
    contact = scene_contact(bundle)
    particles = rest_particles(bundle, labels)
    state = init_state(particles, segments, config, contact=contact)
    return simulate(state, segments, contact, config, n_frames - 1)


def bake_observations(bundle: SceneBundle, true_segments, config: SimConfig, rng=None) -> ObservationBundle:
    """Oracle forward pass; stores public observations and the sealed truth trajectory."""
    spec = SyntheticSceneSpec.from_dict(bundle.meta["spec"])
    rng = np.random.default_rng(spec.seed + 1) if rng is None else rng
    labels = bundle["truth/labels"]
    try:
        traj = oracle_trajectory(bundle, true_segments, spec.n_frames, labels=labels)
    except NumericError as exc:
        raise ConfigurationError(f"scene is ill-posed: simulation fails under true materials ({exc})") from exc
    bundle["truth/x"] = traj.x
    n = traj.x.shape[1]
    if spec.track_fraction >= 1.0:
        ids = np.arange(n)
    else:
        m = max(1, int(round(spec.track_fraction * n)))
        ids = np.sort(rng.choice(n, size=m, replace=False))
    tracks = traj.x[:spec.n_train, ids].copy()
    if spec.track_noise > 0:
        tracks += spec.track_noise * rng.normal(size=tracks.shape)
    appearance = scene_appearance(bundle)
    masks, rgb, feats = render_frames(traj.x[:spec.n_train], appearance)
    dmaps = distance_maps_from_masks(masks)
    bundle["obs/track_ids"] = ids.astype(np.int32)
    bundle["obs/tracks"] = tracks
    bundle["obs/masks"] = masks.astype(np.uint8)
    bundle["obs/distance_maps"] = dmaps
    bundle["obs/rgb"] = np.round(rgb * 255.0).astype(np.uint8)
    bundle["obs/features"] = feats.astype(np.float32)
    return observations(bundle)


def observations(bundle: SceneBundle, with_images: bool = True) -> ObservationBundle:
    if "obs/tracks" not in bundle:
        raise DataError("bundle carries no observations")
    has_img = with_images and "obs/masks" in bundle
    cfg = scene_config(bundle)
    return ObservationBundle(
        track_ids=bundle["obs/track_ids"].astype(np.int64),
        tracks=bundle["obs/tracks"],
        frame_dt=cfg.frame_dt,
        cameras=scene_cameras(bundle) if has_img else [],
        masks=bundle["obs/masks"].astype(bool) if has_img else None,
        distance_maps=bundle["obs/distance_maps"].astype(np.float64) if has_img else None,
        rgb=bundle["obs/rgb"].astype(np.float64) / 255.0 if has_img and "obs/rgb" in bundle else None,
        features=bundle["obs/features"].astype(np.float64) if has_img and "obs/features" in bundle else None,
    )


def trajectory_bundle(scene: SceneBundle, positions, frames, params: dict | None = None) -> SceneBundle:
    """Public trajectory container: positions for 0-based ``frames`` plus render metadata."""
    out = SceneBundle(meta={
        "kind": TRAJECTORY_KIND,
        "frames": [int(f) + 1 for f in frames],
        "config": scene.meta["config"],
        "cameras": scene.meta["cameras"],
        "background": scene.meta["background"],
        "params": params or {},
    })
    out["trajectory/x"] = np.asarray(positions, dtype=np.float64)
    out["particles/color"] = scene["particles/color"]
    out["particles/render_feature"] = scene["particles/render_feature"]
    return out
