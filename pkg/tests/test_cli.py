import json
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from densetact.calibration import load_calibration, spherical_to_pixel
from densetact.cli import DEFAULTS, load_config, main

GRASP_SCHEMA = {
    "type": "object",
    "required": ["schema", "version", "trials", "summary"],
    "properties": {
        "schema": {"const": "densetact-grasp-eval"},
        "version": {"const": 1},
        "trials": {"type": "array", "minItems": 2, "items": {
            "type": "object",
            "required": ["trial", "ok", "fitness", "inlier_rmse", "iterations", "pose"],
            "properties": {
                "ok": {"const": True},
                "fitness": {"type": "number", "minimum": 0, "maximum": 1},
                "inlier_rmse": {"type": "number", "minimum": 0},
                "pose": {"type": "object", "required": ["rotation", "translation"]},
            },
        }},
        "summary": {
            "type": "object",
            "required": ["trials", "succeeded", "fitness_mean", "rmse_mean_mm", "reference"],
            "properties": {"reference": {"type": "object", "required": ["fitness", "rmse"]}},
        },
    },
}


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.setenv("DENSETACT_HOME", str(tmp_path))
    return tmp_path


def write_cfg(home, **blocks):
    p = home / "run.json"
    p.write_text(json.dumps(blocks))
    return str(p)


def files(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != ".lock"}


def log_events(err):
    return [json.loads(line) for line in err.splitlines() if line.startswith("{")]


# -- config ---------------------------------------------------------------------------

def test_defaults_resolve():
    assert load_config() == DEFAULTS


def test_unknown_key_rejected(home, capsys):
    cfg = write_cfg(home, training={"epochz": 3})
    assert main(["train", "--config", cfg]) == 2
    assert "training.epochz" in capsys.readouterr().err


def test_bad_json_rejected(home):
    (home / "bad.json").write_text("{oops")
    assert main(["calibrate", "--synthetic", "--config", str(home / "bad.json")]) == 2


def test_usage_errors(home):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["calibrate"]) == 2     # no image, samples or fixture


def test_resolved_config_logged(home, capsys):
    assert main(["calibrate", "--synthetic", "--seed", "9"]) == 0
    ev = log_events(capsys.readouterr().err)
    first = ev[0]
    assert first["event"] == "config" and len(first["config_hash"]) == 64
    assert first["config"]["training"]["seed"] == 9 and first["config"]["dataset"]["seed"] == 9


# -- calibrate --------------------------------------------------------------------------

def test_calibrate_synthetic(home, capsys):
    assert main(["calibrate", "--synthetic"]) == 0
    out = capsys.readouterr().out
    assert "valid pixels:" in out and "log marginal likelihood" in out
    path = home / "calibration" / "calibration.json"
    cal = load_calibration(path)
    t = cal.table
    vv, uu = np.nonzero(t.valid)
    u2, v2 = spherical_to_pixel(cal.model, cal.gp, t.theta[t.valid], t.psi[t.valid])
    assert np.all(np.hypot(u2 - uu, v2 - vv) <= 0.5)
    first = json.loads(path.read_text())["content_hash"]
    assert main(["calibrate", "--synthetic"]) == 0
    assert json.loads(path.read_text())["content_hash"] == first


def test_calibrate_from_samples(home, capsys):
    edges = [[3.4563, 10], [6.9001, 20], [10.3828, 30], [13.856, 40], [17.2765, 50]]
    (home / "edges.json").write_text(json.dumps({"edges": edges}))
    assert main(["calibrate", "--samples", str(home / "edges.json")]) == 0
    cal = load_calibration(home / "calibration" / "calibration.json")
    assert cal.gp.r.max() == pytest.approx(17.2765)


def test_calibrate_bad_samples(home):
    (home / "s.json").write_text(json.dumps({"points": []}))
    assert main(["calibrate", "--samples", str(home / "s.json")]) == 2


def test_calibrate_failure_exit_1(home, tmp_path):
    from densetact.io import write_png
    write_png(tmp_path / "flat.png", np.full((64, 64), 128, np.uint8))
    assert main(["calibrate", "--image", str(tmp_path / "flat.png")]) == 1


# -- dry runs ----------------------------------------------------------------------------

def test_dry_run_touches_nothing(home, small_dataset):
    assert main(["calibrate", "--synthetic"]) == 0
    before = files(home)
    assert main(["calibrate", "--synthetic", "--dry-run"]) == 0
    assert main(["gen-dataset", "--dry-run"]) == 0
    assert main(["train", "--dry-run", "--dataset", str(small_dataset)]) == 0
    assert main(["evaluate", "--dry-run", "--checkpoint", str(home / "nope.dtnn"), "--dataset",
                 str(small_dataset)]) == 2
    assert files(home) == before
    assert sorted(p.name for p in home.iterdir()) == ["calibration"]


# -- pipeline ----------------------------------------------------------------------------

@pytest.fixture
def pipeline(home):
    cfg = write_cfg(home, dataset={"n": 12, "n_test": 2, "seed": 4}, training={"epochs": 2, "warmup_steps": 4})
    assert main(["calibrate", "--synthetic", "--config", cfg]) == 0
    assert main(["gen-dataset", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    return home, cfg


def test_pipeline_artifacts_byte_identical(pipeline, capsys):
    home, cfg = pipeline
    first = files(home)
    for sub in ("calibration", "dataset", "train"):
        assert any(k.startswith(sub) for k in first)
    assert main(["calibrate", "--synthetic", "--config", cfg]) == 0
    assert main(["gen-dataset", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    assert files(home) == first


def test_predict_and_evaluate(pipeline, capsys):
    home, cfg = pipeline
    img = home / "dataset" / "images" / "000011.png"
    assert main(["predict", "--config", cfg, "--checkpoint", str(home / "train" / "model.dtnn"),
                 "--image", str(img)]) == 0
    assert (home / "predict" / "000011_depth.png").exists()
    assert (home / "predict" / "000011.ply").read_text().startswith("ply\n")
    assert main(["evaluate", "--config", cfg, "--checkpoint", str(home / "train" / "model.dtnn")]) == 0
    summary = json.loads((home / "eval" / "summary.json").read_text())
    assert summary["summary"]["images"] == 2 and summary["split"] == "test"
    assert (home / "eval" / "errors.csv").read_text().startswith("image,l1_mm,mse_mm2")


def test_predict_non_image(pipeline, capsys):
    home, cfg = pipeline
    (home / "notes.png").write_text("not an image")
    rc = main(["predict", "--config", cfg, "--checkpoint", str(home / "train" / "model.dtnn"),
               "--image", str(home / "notes.png")])
    assert rc == 2
    err = log_events(capsys.readouterr().err)[-1]
    assert err["level"] == "error" and err["kind"] == "FormatError"


def test_corrupt_checkpoint_is_format_error(pipeline):
    home, cfg = pipeline
    ck = home / "train" / "model.dtnn"
    data = bytearray(ck.read_bytes())
    data[-1] ^= 0xFF
    ck.write_bytes(bytes(data))
    assert main(["predict", "--config", cfg, "--checkpoint", str(ck),
                 "--image", str(home / "dataset" / "images" / "000000.png")]) == 2


def test_train_missing_dataset_is_runtime_error(home):
    assert main(["train", "--dataset", str(home / "missing")]) == 1


# -- grasp -------------------------------------------------------------------------------

def test_evaluate_grasp_schema(home):
    spec = {"object": {"sphere": 30.0, "subdivisions": 4},
            "synthetic": {"directions": [[0, 0, 1], [1, 0, 0]], "noise_std": 0.1, "seed": 2}}
    (home / "grasp.json").write_text(json.dumps(spec))
    cfg = write_cfg(home, evaluation={"inlier_threshold": 1.0})
    assert main(["evaluate", "--config", cfg, "--grasp", str(home / "grasp.json")]) == 0
    doc = json.loads((home / "eval" / "grasp.json").read_text())
    jsonschema.validate(doc, GRASP_SCHEMA)
    assert doc["summary"]["succeeded"] == 2
    assert 0.05 < doc["summary"]["rmse_mean_mm"] < 0.15


def test_evaluate_grasp_bad_spec(home):
    (home / "grasp.json").write_text(json.dumps({"object": {"cube": 3}}))
    assert main(["evaluate", "--grasp", str(home / "grasp.json")]) == 2


@pytest.mark.slow
def test_full_desk_pipeline(home, capsys):
    """calibrate -> 200 records -> 20 epochs -> evaluate, timed end to end."""
    cfg = write_cfg(home, training={"epochs": 20})
    t0 = time.perf_counter()
    for cmd in (["calibrate", "--synthetic"], ["gen-dataset"], ["train"],
                ["evaluate", "--checkpoint", str(home / "train" / "model.dtnn")]):
        assert main(cmd + ["--config", cfg]) == 0
    elapsed = time.perf_counter() - t0
    summary = json.loads((home / "eval" / "summary.json").read_text())
    l1 = summary["summary"]["l1_mean_mm"]
    from densetact.dataset import load_dataset
    ds = load_dataset(home / "dataset")
    te = ds.indices("test")
    baseline = float(np.mean([ds.depth[i][ds.valid].mean() for i in te]) * 9.4 / 255)
    assert elapsed < 30 * 60
    assert l1 <= 0.47 and l1 <= baseline / 3
