from __future__ import annotations

import json

import numpy as np
import pytest

from mmsysid.cli import ENV_PREFIX, METRICS_SCHEMA, env_overrides, parse_frames, run
from mmsysid.io import read_bundle


def _small(tmp_path, name="scene", **extra):
    spec = tmp_path / f"{name}.json"
    spec.write_text(json.dumps({"preset": "cantilever", "overrides": {
        "n_frames": 6, "n_train": 5, "image_size": 32, "focal": 50.0, "n_cameras": 2, **extra}}))
    out = tmp_path / f"{name}.scene"
    assert run(["gen-scene", str(spec), "-o", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    return _small(tmp_path_factory.mktemp("cli"))


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_no_command_and_unknown_flag_are_usage_errors(capsys):
    assert run([]) == 2
    assert run(["evaluate", "a", "b", "-o", "m.json", "--bogus"]) == 2
    assert "usage:" in capsys.readouterr().err


def test_bad_frame_range():
    assert parse_frames("51:80") == (50, 79)
    assert parse_frames("7") == (6, 6)
    for bad in ("0:3", "5:2", "a:b"):
        with pytest.raises(Exception):
            parse_frames(bad)
    assert run(["predict", "s", "r", "--frames", "9:3", "-o", "p"]) == 2


def test_missing_input_is_data_error(tmp_path, capsys):
    assert run(["simulate", str(tmp_path / "nope.scene"), "--frames", "3", "-o", str(tmp_path / "t")]) == 3
    assert _err(capsys)["error"] == "data"


def test_corrupt_input_is_data_error(tmp_path, small_scene, capsys):
    bad = tmp_path / "bad.scene"
    blob = bytearray(small_scene.read_bytes())
    blob[-10] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert run(["simulate", str(bad), "--frames", "3", "-o", str(tmp_path / "t")]) == 3
    err = _err(capsys)
    assert err["exit_code"] == 3 and err["type"] == "CorruptionError"


def test_numeric_failure_exit_code(tmp_path, small_scene, capsys):
    params = tmp_path / "p.json"
    params.write_text(json.dumps([{"id": 0, "log10_E": 9.0, "log10_rho": 1.0},
                                  {"id": 1, "log10_E": 9.0, "log10_rho": 1.0}]))
    code = run(["simulate", str(small_scene), "--frames", "6", "--params", str(params),
                "-o", str(tmp_path / "t.scene")])
    assert code == 4
    assert _err(capsys)["error"] == "numeric"


def test_evaluate_identical_is_perfect(tmp_path, small_scene):
    traj = tmp_path / "t.scene"
    assert run(["simulate", str(small_scene), "--frames", "4", "-o", str(traj)]) == 0
    out = tmp_path / "m.json"
    assert run(["evaluate", str(traj), str(traj), "--size", "64", "-o", str(out)]) == 0
    m = json.loads(out.read_text())
    assert m["schema"] == METRICS_SCHEMA and m["image_size"] == [64, 64]
    assert [r["frame"] for r in m["frames"]] == [1, 2, 3, 4]
    for r in m["frames"]:
        assert (r["iou"], r["chamfer_px"], r["psnr_db"]) == (1.0, 0.0, 60.0)
    # the oracle scene is an accepted truth source as well
    assert run(["evaluate", str(traj), str(small_scene), "--size", "64", "-o", str(tmp_path / "m2.json")]) == 0
    assert json.loads((tmp_path / "m2.json").read_text())["mean"]["iou"] == 1.0


def test_manifest_and_determinism(tmp_path, small_scene):
    a, b = tmp_path / "a.scene", tmp_path / "b.scene"
    for p in (a, b):
        assert run(["simulate", str(small_scene), "--frames", "3", "-o", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    man = json.loads((tmp_path / "a.scene.manifest.json").read_text())
    assert man["command"] == "simulate" and man["workers"] == 1
    assert man["outputs"] == [str(a)] and man["config"]["substeps_per_frame"] > 0
    assert set(man["versions"]) >= {"mmsysid", "numpy", "backend"}


def test_seed_recorded_and_changes_noise(tmp_path):
    s0 = _small(tmp_path, "s0", track_noise=1e-4)
    spec = tmp_path / "s0.json"
    s1 = tmp_path / "s1.scene"
    assert run(["gen-scene", str(spec), "--seed", "1", "-o", str(s1)]) == 0
    assert json.loads((tmp_path / "s0.scene.manifest.json").read_text())["seed"] == 0
    assert json.loads((tmp_path / "s1.scene.manifest.json").read_text())["seed"] == 1
    t0, t1 = read_bundle(s0, mode="oracle")["obs/tracks"], read_bundle(s1, mode="oracle")["obs/tracks"]
    assert not np.array_equal(t0, t1)


def test_skip_existing(tmp_path, small_scene):
    out = tmp_path / "t.scene"
    out.write_bytes(b"placeholder")
    assert run(["simulate", str(small_scene), "--frames", "3", "--skip-existing", "-o", str(out)]) == 0
    assert out.read_bytes() == b"placeholder"
    assert run(["simulate", str(small_scene), "--frames", "3", "-o", str(out)]) == 0
    assert out.read_bytes() != b"placeholder"


def test_env_overrides(tmp_path, small_scene, monkeypatch):
    assert env_overrides({ENV_PREFIX + "GRAVITY": "[0, 0, -1]", "OTHER": "x"}) == {"gravity": [0, 0, -1]}
    monkeypatch.setenv(ENV_PREFIX + "NOT_A_FIELD", "1")
    assert run(["simulate", str(small_scene), "--frames", "3", "-o", str(tmp_path / "x")]) == 2
    monkeypatch.delenv(ENV_PREFIX + "NOT_A_FIELD")
    monkeypatch.setenv(ENV_PREFIX + "GRAVITY", "[0, 0, 0]")
    out = tmp_path / "g.scene"
    assert run(["simulate", str(small_scene), "--frames", "3", "-o", str(out)]) == 0
    man = json.loads((tmp_path / "g.scene.manifest.json").read_text())
    assert man["config"]["gravity"] == [0, 0, 0]


def test_estimate_predict_render(tmp_path, small_scene):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"stages": [
        {"batch_frames": None, "n_batches": 1, "loss_kind": "3D-full", "iterations": 1},
        {"batch_frames": None, "n_batches": 1, "loss_kind": "2D-full", "iterations": 1}]}))
    res = tmp_path / "r.json"
    assert run(["estimate", str(small_scene), "--plan", str(plan), "--no-images", "-o", str(res)]) == 0
    report = json.loads(res.read_text())
    assert report["partial"] is True and len(report["final_segments"]) == 2
    pred = tmp_path / "p.scene"
    assert run(["predict", str(small_scene), str(res), "--frames", "2:4", "-o", str(pred)]) == 0
    assert read_bundle(pred, mode="estimation").meta["frames"] == [2, 3, 4]
    frames = tmp_path / "frames"
    assert run(["render", str(pred), "--view", "1", "-o", str(frames)]) == 0
    names = sorted(p.name for p in frames.iterdir())
    assert "frame_0002.ppm" in names and "mask_0004.pgm" in names
    assert run(["render", str(pred), "--view", "5", "-o", str(frames)]) == 2
