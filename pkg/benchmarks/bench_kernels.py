"""Compare the numba and numpy kernel backends on the 1250-particle cantilever.

Each backend runs in its own interpreter because the backend is chosen at
import time from ``MMSYSID_DISABLE_NUMBA``.

    python3 benchmarks/bench_kernels.py [--substeps 200] [--frames 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import tempfile

import numpy as np

CHILD = r"""
import json, sys, time
import numpy as np
from mmsysid import backend_name
from mmsysid.core import MaterialSegment, ParticleSet, SimConfig
from mmsysid.distance import distance_transform
from mmsysid.mpm import init_state, simulate
from mmsysid.render import camera_ring, default_radii, splat

n_sub, n_frames, out = int(sys.argv[1]), int(sys.argv[2]), sys.argv[3]
sp = 0.002
axes = [(np.arange(n) + 0.5) * sp for n in (50, 5, 5)]
x = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3) - [0, 0.005, 0.005]
seg = (x[:, 0] > 0.05).astype(np.int32)
segs = [MaterialSegment(0, 6.0, np.log10(800.0)), MaterialSegment(1, 4.0, np.log10(300.0))]
cfg = SimConfig(dt=1.25e-4, substeps_per_frame=n_sub, domain_min=(0.0, -0.15, -0.15), domain_max=(0.3, 0.15, 0.15))
p = ParticleSet.at_rest(x, seg, np.full(len(x), sp ** 3))
p.v = 0.05 * np.random.default_rng(1).normal(size=x.shape)   # something to integrate
state = init_state(p, segs, cfg)
simulate(state, segs, None, cfg, 1)                      # compile / warm up
t = time.perf_counter()
traj = simulate(state, segs, None, cfg, n_frames)
t_sim = time.perf_counter() - t

cam = camera_ring((0.05, 0, 0), 0.25, 1, focal=200.0, size=128)[0]
vals = np.ones((len(x), 3))
radii = default_radii(cam, (x @ cam.rotation.T + cam.translation)[:, 2], sp)
splat(x, vals, radii, cam)
t = time.perf_counter()
for _ in range(20):
    img, cover, _ = splat(x, vals, radii, cam)
t_splat = (time.perf_counter() - t) / 20

rng = np.random.default_rng(0)
mask = rng.random((128, 128)) < 0.01
distance_transform(mask)
t = time.perf_counter()
for _ in range(20):
    distance_transform(mask)
t_edt = (time.perf_counter() - t) / 20

np.save(out, traj.x[-1])
print(json.dumps({"backend": backend_name(), "substep_ms": 1e3 * t_sim / (n_frames * n_sub),
                  "splat_ms": 1e3 * t_splat, "edt_ms": 1e3 * t_edt}))
"""


def run_backend(disable: bool, substeps: int, frames: int, out: str) -> dict:
    env = dict(os.environ, MMSYSID_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", CHILD, str(substeps), str(frames), out],
                         env=env, check=True, capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--substeps", type=int, default=50)
    ap.add_argument("--frames", type=int, default=4)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        rows = []
        for disable in (False, True):
            out = os.path.join(tmp, f"x_{int(disable)}.npy")
            rows.append((run_backend(disable, args.substeps, args.frames, out), np.load(out)))
    print(f"{'backend':8s} {'substep ms':>11s} {'splat ms':>9s} {'EDT ms':>8s}")
    for r, _ in rows:
        print(f"{r['backend']:8s} {r['substep_ms']:11.3f} {r['splat_ms']:9.3f} {r['edt_ms']:8.3f}")
    (a, xa), (b, xb) = rows
    print(f"numpy / numba substep time: {b['substep_ms'] / a['substep_ms']:.1f}x")
    print(f"max position difference between backends: {np.abs(xa - xb).max():.3e} m")


if __name__ == "__main__":
    main()
