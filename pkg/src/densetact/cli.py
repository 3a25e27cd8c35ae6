"""``densetact`` command-line frontend.

Every command reads an optional JSON run config (unknown keys are rejected),
logs the fully resolved config and its hash as a JSON line on stderr, and
prints a short human summary on stdout. Exit codes: 0 success, 1 runtime
failure, 2 usage/config/format error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DenseTactError, FormatError

log = logging.getLogger("densetact")


class ConfigError(DenseTactError, ValueError):
    module, operation = "cli", "config"


class UsageError(DenseTactError, ValueError):
    module, operation = "cli", "usage"


DEFAULTS = {
    "sensor": {
        "hemisphere_radius": 25.0,
        "sensor_height": 35.0,
        "max_depression": 9.4,
        "image_width": 64,
        "image_height": 64,
        "center_u": 31.5,
        "center_v": 31.5,
        "crop_size": 64,
    },
    "calibration": {
        "tooth_interval_deg": 10.0,
        "n_teeth": 8,
        "fov_deg": 185.0,
        "include_center": True,
        "optimize": True,
        "hyper": None,            # {"signal_var", "length_scale", "noise_var"} overrides
        "image": None,
        "samples": None,
        "output": "calibration/calibration.json",
    },
    "dataset": {
        "n": 200,
        "n_test": 20,
        "seed": 3,
        "axis_b_step_deg": 0.9,
        "axis_a_choices": [0.0, 15.0, 30.0],
        "axis_c_choices": [0.0, 15.0, 30.0],
        "press_range": [0.9, 1.1],
        "indent_range": [1.0, 4.0],
        "noise_std": 0.005,
        "workers": 1,
        "calibration": None,      # defaults to calibration.output
        "output": "dataset",
    },
    "training": {
        "epochs": 60,
        "batch_size": 4,
        "lr": 3e-3,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "seed": 3,
        "schedule": "cosine",
        "warmup_steps": 100,
        "hflip": False,
        "channels": [16, 32, 64],
        "decoder_channels": [64, 64],
        "bottleneck_channels": 128,
        "pool": "max",
        "loss": {"w_depth": 0.1, "w_grad": 1.0, "w_ssim": 1.0, "ssim_window": 7, "ssim_sigma": 1.5,
                 "target_lo": 10.0, "target_hi": 1000.0},
        "dataset": None,          # defaults to dataset.output
        "output": "train",
    },
    "evaluation": {
        "max_iter": 50,
        "inlier_threshold": None,  # mm; None -> 2% of the object cloud's bounding radius
        "n_object_points": 20000,
        "seed": 0,
        "output": "eval",
    },
}


# -- config -------------------------------------------------------------------

def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict) and k not in ("hyper",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if seed is not None:
        for block in ("dataset", "training", "evaluation"):
            cfg[block]["seed"] = int(seed)
    hyper = cfg["calibration"]["hyper"]
    if hyper is not None:
        if not isinstance(hyper, dict) or set(hyper) - {"signal_var", "length_scale", "noise_var"}:
            raise ConfigError("calibration.hyper takes signal_var, length_scale and noise_var")
    return cfg


def config_hash(cfg: dict) -> str:
    from .io import canonical_json, sha256_hex
    return sha256_hex(canonical_json({"version": __version__, "config": cfg}).encode())


# -- logging ------------------------------------------------------------------

class _JsonLines(logging.Formatter):
    def format(self, record):
        ev = {"ts": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        ev.update(getattr(record, "fields", {}))
        return json.dumps(ev, sort_keys=True, default=str)


def _setup_logging(level=logging.INFO):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    root = logging.getLogger("densetact")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _event(name: str, level=logging.INFO, **fields):
    log.log(level, name, extra={"fields": fields})


# -- helpers ------------------------------------------------------------------

def _home(args) -> Path:
    if args.home:
        return Path(args.home)
    return Path(os.environ.get("DENSETACT_HOME", "."))


def _resolve(home: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else home / p


def _sensor(cfg):
    from .sensor import SensorModel
    try:
        return SensorModel(**cfg["sensor"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sensor block: {exc}") from exc


def _dataset_spec(cfg):
    from .dataset import DatasetSpec
    d = cfg["dataset"]
    try:
        return DatasetSpec(n=int(d["n"]), n_test=int(d["n_test"]), seed=int(d["seed"]),
                           axis_b_step_deg=float(d["axis_b_step_deg"]),
                           axis_a_choices=tuple(d["axis_a_choices"]), axis_c_choices=tuple(d["axis_c_choices"]),
                           press_range=tuple(d["press_range"]), indent_range=tuple(d["indent_range"]),
                           noise_std=float(d["noise_std"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid dataset block: {exc}") from exc


def _train_config(cfg):
    from .recon import LossSpec, TrainConfig
    t = cfg["training"]
    try:
        return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
                           betas=tuple(t["betas"]), eps=float(t["eps"]), seed=int(t["seed"]),
                           schedule=t["schedule"], warmup_steps=int(t["warmup_steps"]), hflip=bool(t["hflip"]),
                           loss=LossSpec(**t["loss"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training block: {exc}") from exc


def _net(cfg):
    from .recon import ReconNet
    t = cfg["training"]
    try:
        return ReconNet(channels=tuple(t["channels"]), seed=int(t["seed"]),
                        target_range=(t["loss"]["target_lo"], t["loss"]["target_hi"]),
                        decoder_channels=tuple(t["decoder_channels"]),
                        bottleneck_channels=int(t["bottleneck_channels"]), pool=t["pool"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid network settings: {exc}") from exc


def _calibration_path(cfg, home):
    p = cfg["dataset"]["calibration"] or cfg["calibration"]["output"]
    return _resolve(home, p)


# -- commands -----------------------------------------------------------------

def cmd_calibrate(args, cfg, home) -> dict:
    from .calibration import (calibrate, calibration_samples, detect_sawtooth_edges, equidistant_edge_radii,
                              render_sawtooth_image, save_calibration)
    from .gp import GpHyper
    from .io import exclusive_lock, read_image

    c = cfg["calibration"]
    model = _sensor(cfg)
    image = args.image or c["image"]
    samples = args.samples or c["samples"]
    if sum(x is not None for x in (image, samples, args.synthetic or None)) != 1:
        raise UsageError("calibrate needs exactly one of --image, --samples or --synthetic")
    hyper = GpHyper(**c["hyper"]) if c["hyper"] else None
    out = _resolve(home, c["output"])
    if args.dry_run:
        if image is not None and not Path(image).exists():
            raise UsageError(f"calibration image {image} does not exist")
        if samples is not None and not Path(samples).exists():
            raise UsageError(f"sample file {samples} does not exist")
        return {"would_write": [str(out), str(out) + ".table"]}
    if samples is not None:
        try:
            doc = json.loads(Path(samples).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read sample file {samples}: {exc}") from exc
        if "samples" in doc:
            pairs = np.asarray(doc["samples"], dtype=np.float64)
        elif "edges" in doc:
            edges = [(float(r), math.radians(float(t))) for r, t in doc["edges"]]
            pairs = calibration_samples(edges, model, c["include_center"])
        else:
            raise FormatError("sample file needs a 'samples' [[r_px, y_mm]] or 'edges' [[r_px, theta_deg]] list")
        source = {"samples": str(samples)}
    else:
        if image is not None:
            img = read_image(image)
            source = {"image": str(image)}
        else:
            radii = equidistant_edge_radii(model, c["tooth_interval_deg"], c["n_teeth"], c["fov_deg"])
            img = render_sawtooth_image(model, radii)
            source = {"synthetic": True}
        edges = detect_sawtooth_edges(img, model, c["tooth_interval_deg"])
        _event("edges_detected", count=len(edges), radii_px=[round(r, 4) for r, _ in edges])
        pairs = calibration_samples(edges, model, c["include_center"])
    cal = calibrate(model, pairs, hyper=hyper, optimize=c["optimize"] and hyper is None,
                    tooth_interval_deg=c["tooth_interval_deg"])
    with exclusive_lock(out.parent):
        doc = save_calibration(cal, out)
    lml = cal.gp.log_marginal_likelihood
    _event("calibration_written", path=str(out), content_hash=doc["content_hash"], **source)
    print(f"calibration: {out}")
    print(f"valid pixels: {cal.table.valid_count}")
    print(f"GP log marginal likelihood: {lml:.6f}")
    return {"path": str(out), "valid_pixels": cal.table.valid_count, "log_marginal_likelihood": lml,
            "content_hash": doc["content_hash"]}


def cmd_gen_dataset(args, cfg, home) -> dict:
    from .calibration import load_calibration
    from .dataset import generate_dataset, record_plan

    spec = _dataset_spec(cfg)
    cal_path = Path(args.calibration) if args.calibration else _calibration_path(cfg, home)
    out = Path(args.out) if args.out else _resolve(home, cfg["dataset"]["output"])
    if args.dry_run:
        if not cal_path.exists():
            raise UsageError(f"calibration {cal_path} does not exist")
        plan = record_plan(spec)
        return {"would_write": str(out), "records": len(plan)}
    cal = load_calibration(cal_path)
    t0 = time.perf_counter()
    manifest = generate_dataset(cal, spec, out, workers=int(cfg["dataset"]["workers"]))
    dt = time.perf_counter() - t0
    _event("dataset_written", path=str(out), records=len(manifest["records"]), seconds=round(dt, 3))
    print(f"dataset: {out} ({manifest['split']['train']} train / {manifest['split']['test']} test)")
    return {"path": str(out), "records": len(manifest["records"])}


def cmd_train(args, cfg, home) -> dict:
    from .io import exclusive_lock
    from .recon import train
    from .recon.checkpoint import save_checkpoint

    tcfg = _train_config(cfg)
    net = _net(cfg)
    ds = Path(args.dataset) if args.dataset else _resolve(home, cfg["training"]["dataset"] or cfg["dataset"]["output"])
    out = Path(args.out) if args.out else _resolve(home, cfg["training"]["output"])
    if args.dry_run:
        from .dataset import load_manifest
        load_manifest(ds)
        return {"would_write": str(out), "parameters": net.parameter_count}
    t0 = time.perf_counter()

    def on_epoch(m):
        _event("epoch", epoch=m.epoch, train_loss=m.train_loss, depth=m.depth, grad=m.grad, ssim=m.ssim,
               test_l1_mm=m.test_l1_mm, seconds=round(time.perf_counter() - t0, 3))

    with exclusive_lock(out):
        res = train(net, ds, tcfg, out, log=on_epoch)
        final = out / "model.dtnn"
        digest = save_checkpoint(res.net, final, {"epoch": tcfg.epochs, "train": tcfg.to_dict()})
    last = res.metrics[-1]
    _event("training_done", checkpoint=str(final), checkpoint_sha256=digest, parameter_hash=res.parameter_hash,
           test_l1_mm=last.test_l1_mm, baseline_l1_mm=res.baseline_l1_mm)
    print(f"checkpoint: {final}")
    print(f"final train loss {last.train_loss:.4f}; test mean L1 {last.test_l1_mm:.4f} mm "
          f"(zero-depression baseline {res.baseline_l1_mm:.4f} mm)")
    return {"checkpoint": str(final), "test_l1_mm": last.test_l1_mm, "baseline_l1_mm": res.baseline_l1_mm,
            "parameter_hash": res.parameter_hash}


def cmd_predict(args, cfg, home) -> dict:
    from .calibration import load_calibration
    from .io import exclusive_lock, read_image, save_depth_map
    from .pointcloud import depth_to_pointcloud, write_ply
    from .recon import predict
    from .recon.checkpoint import load_checkpoint

    if not args.checkpoint or not args.image:
        raise UsageError("predict needs --checkpoint and --image")
    img = read_image(args.image)
    if img.ndim != 3:
        raise FormatError(f"{args.image} is not an RGB image")
    cal_path = Path(args.calibration) if args.calibration else _calibration_path(cfg, home)
    out = Path(args.out) if args.out else _resolve(home, "predict")
    if args.dry_run:
        for p in (args.checkpoint, cal_path):
            if not Path(p).exists():
                raise UsageError(f"{p} does not exist")
        return {"would_write": str(out)}
    net, _ = load_checkpoint(args.checkpoint)
    cal = load_calibration(cal_path)
    pred = predict(net, img, cal.model, valid=cal.table.valid)
    stem = Path(args.image).stem
    with exclusive_lock(out):
        save_depth_map(pred.depth, out / f"{stem}_depth.png", cal.model)
        rgb = cal.model.crop(img) if img.shape[:2] != pred.depth.shape else img
        cloud = depth_to_pointcloud(pred.depth, cal.table, cal.model, rgb)
        write_ply(cloud, out / f"{stem}.ply")
    _event("prediction_written", depth=str(out / f"{stem}_depth.png"), cloud=str(out / f"{stem}.ply"),
           points=len(cloud), latency_ms=round(pred.latency_ms, 3))
    print(f"depth: {out / f'{stem}_depth.png'}  cloud: {out / f'{stem}.ply'} ({len(cloud)} points)")
    print(f"latency: {pred.latency_ms:.2f} ms")
    return {"depth": str(out / f"{stem}_depth.png"), "points": len(cloud), "latency_ms": pred.latency_ms}


def _grasp_inputs(spec: dict, cfg: dict, base: Path):
    """Build (sensor clouds, object model, init poses) from a grasp spec document."""
    from .geometry import RigidPose
    from .mesh import load_stl
    from .pointcloud import PointCloud, read_ply, sample_mesh_points
    from .shapes import icosphere

    allowed = {"object", "sensors", "synthetic"}
    if not isinstance(spec, dict) or set(spec) - allowed or "object" not in spec:
        raise FormatError("grasp spec must be an object with 'object' and 'sensors' or 'synthetic' keys")
    obj = spec["object"]
    if "sphere" in obj:
        mesh = icosphere(float(obj["sphere"]), int(obj.get("subdivisions", 4)))
    elif "stl" in obj:
        mesh = load_stl(base / obj["stl"])
    else:
        raise FormatError("grasp object needs 'sphere' (radius mm) or 'stl' (path)")
    ev = cfg["evaluation"]
    target = sample_mesh_points(mesh, int(ev["n_object_points"]), int(ev["seed"]))
    clouds, inits = [], []
    if "synthetic" in spec:
        syn = spec["synthetic"]
        rng = np.random.default_rng(int(syn.get("seed", ev["seed"])))
        noise = float(syn.get("noise_std", 0.0))
        cap = math.radians(float(syn.get("cap_deg", 35.0)))
        for d in syn.get("directions", [[0, 0, 1], [1, 0, 0]]):
            d = np.asarray(d, dtype=np.float64)
            d /= np.linalg.norm(d)
            pts = target.points
            c = pts - target.centroid
            sel = (c @ d) >= np.cos(cap) * np.linalg.norm(c, axis=1)
            p = pts[sel]
            if noise > 0:
                n = c[sel] / np.linalg.norm(c[sel], axis=1, keepdims=True)
                p = p + rng.normal(0.0, noise, (len(p), 1)) * n
            clouds.append((PointCloud(p), RigidPose()))
            inits.append(RigidPose())
    else:
        for s in spec.get("sensors", []):
            cloud = read_ply(base / s["cloud"])
            mount = RigidPose.from_dict(s["mount"]) if "mount" in s else RigidPose()
            init = RigidPose.from_dict(s["init"]) if "init" in s else RigidPose()
            clouds.append((cloud, mount))
            inits.append(init)
    if not clouds:
        raise FormatError("grasp spec lists no sensors")
    return clouds, target, inits


def cmd_evaluate(args, cfg, home) -> dict:
    from .io import exclusive_lock, write_json
    out = Path(args.out) if args.out else _resolve(home, cfg["evaluation"]["output"])
    if (args.grasp is None) == (args.checkpoint is None):
        raise UsageError("evaluate needs either --checkpoint (with a dataset) or --grasp")
    if args.grasp is not None:
        from .pointcloud import evaluate_grasp
        try:
            spec = json.loads(Path(args.grasp).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read grasp spec {args.grasp}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"grasp spec {args.grasp} is not valid JSON: {exc}") from exc
        clouds, target, inits = _grasp_inputs(spec, cfg, Path(args.grasp).parent)
        if args.dry_run:
            return {"would_write": str(out / "grasp.json"), "sensors": len(clouds)}
        ev = cfg["evaluation"]
        res = evaluate_grasp(clouds, target, inits, inlier_threshold=ev["inlier_threshold"],
                             max_iter=int(ev["max_iter"]))
        doc = res.to_dict()
        with exclusive_lock(out):
            write_json(out / "grasp.json", doc)
        s = res.summary
        _event("grasp_evaluated", path=str(out / "grasp.json"), **{k: v for k, v in s.items() if k != "reference"})
        print(f"grasp: {s['succeeded']}/{s['trials']} registered; fitness {s['fitness_mean']}, "
              f"RMSE {s['rmse_mean_mm']} mm")
        return doc

    from .dataset import load_dataset
    from .pointcloud import error_statistics
    from .recon import predict
    from .recon.checkpoint import load_checkpoint
    from .sensor import DepthMap, SensorModel

    ds_path = Path(args.dataset) if args.dataset else _resolve(home, cfg["dataset"]["output"])
    if args.dry_run:
        from .dataset import load_manifest
        load_manifest(ds_path)
        if not Path(args.checkpoint).exists():
            raise UsageError(f"{args.checkpoint} does not exist")
        return {"would_write": str(out / "errors.csv")}
    net, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(ds_path)
    model = SensorModel.from_dict(ds.manifest["sensor"])
    preds, truths, lat = [], [], []
    for i in ds.indices(args.split):
        p = predict(net, ds.images[i], model, valid=ds.valid)
        preds.append(p.depth)
        lat.append(p.latency_ms)
        truths.append(DepthMap(ds.depth[i], ds.valid, model.max_depression))
    if not preds:
        raise DenseTactError(f"dataset has no '{args.split}' records")
    stats = error_statistics(preds, truths, model)
    summary = dict(stats.metadata(), split=args.split, latency_ms_mean=float(np.mean(lat)))
    with exclusive_lock(out):
        stats.write_csv(out / "errors.csv")
        write_json(out / "summary.json", summary)
    _event("depth_evaluated", path=str(out / "errors.csv"), l1_mean_mm=stats.summary["l1_mean_mm"])
    print(f"{args.split}: mean L1 {stats.summary['l1_mean_mm']:.4f} mm over {len(preds)} images; "
          f"MSE {stats.summary['mse_mean_mm2']:.5f} mm^2")
    return summary


COMMANDS = {
    "calibrate": cmd_calibrate,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="override dataset/training/evaluation seeds")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and config; write nothing")
    common.add_argument("--home", help="artifact root (default: $DENSETACT_HOME or .)")
    common.add_argument("--out", help="output location (overrides the config)")
    p = _Parser(prog="densetact", description="Desk-scale dense tactile reconstruction pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    c = sub.add_parser("calibrate", parents=[common], help="fit the fisheye correspondence")
    c.add_argument("--image", help="saw-tooth calibration image")
    c.add_argument("--samples", help="JSON file with GP samples or detected edges")
    c.add_argument("--synthetic", action="store_true", help="use the rendered equidistant fixture")
    g = sub.add_parser("gen-dataset", parents=[common], help="render a labeled dataset")
    g.add_argument("--calibration")
    t = sub.add_parser("train", parents=[common], help="train the reconstruction network")
    t.add_argument("--dataset")
    r = sub.add_parser("predict", parents=[common], help="predict depth for one image")
    r.add_argument("--checkpoint")
    r.add_argument("--image")
    r.add_argument("--calibration")
    e = sub.add_parser("evaluate", parents=[common], help="depth error statistics or grasp registration")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--grasp", help="grasp spec JSON")
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose one of " + ", ".join(COMMANDS))
        cfg = load_config(args.config, args.seed)
        home = _home(args)
        _event("config", command=args.command, config=cfg, config_hash=config_hash(cfg), version=__version__,
               dry_run=args.dry_run)
        result = COMMANDS[args.command](args, cfg, home)
        if args.dry_run:
            print(f"dry run ok: {json.dumps(result, sort_keys=True)}")
        _event("done", command=args.command)
        return 0
    except (UsageError, ConfigError, FormatError) as exc:
        _event("error", logging.ERROR, kind=type(exc).__name__, module=exc.module, operation=exc.operation, cause=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DenseTactError as exc:
        _event("error", logging.ERROR, kind=type(exc).__name__, module=exc.module, operation=exc.operation, cause=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure outside the module error hierarchy
        _event("error", logging.ERROR, kind=type(exc).__name__, module="densetact", operation="", cause=str(exc))
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
