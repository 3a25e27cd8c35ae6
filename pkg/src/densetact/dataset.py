"""Seeded synthetic dataset generation and loading.

Layout::

    manifest.json
    mask.png               valid-pixel mask shared by every record
    images/NNNNNN.png      8-bit RGB sensor image
    depth/NNNNNN.png       8-bit depression codes
    meta/NNNNNN.json       scene provenance

Train and test records use disjoint (indicator, indenter) combinations.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calibration import Calibration
from .errors import DatasetError
from .io import exclusive_lock, read_image, to_uint8, write_json, write_png
from .library import INDENTERS, INDICATORS, build_press_scene
from .simulate import ShadingParams, default_lights, depth_from_trace, image_from_trace, trace_scene

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "densetact-dataset"
MANIFEST_VERSION = 1
B_STEPS_PER_TURN = 400


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 200
    n_test: int = 20
    seed: int = 0
    axis_b_step_deg: float = 0.9
    axis_a_choices: tuple = (0.0, 15.0, 30.0)
    axis_c_choices: tuple = (0.0, 15.0, 30.0)
    press_range: tuple = (0.9, 1.1)
    indent_range: tuple = (1.0, 4.0)
    noise_std: float = 0.005
    indicators: tuple = field(default_factory=lambda: tuple(range(len(INDICATORS))))
    indenters: tuple = field(default_factory=lambda: tuple(range(len(INDENTERS))))

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dataset needs n >= 1")
        if not 0 <= self.n_test < self.n:
            raise ValueError("n_test must be in [0, n)")

    @property
    def n_train(self) -> int:
        return self.n - self.n_test

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def split_combinations(spec: DatasetSpec):
    """Shuffle all (indicator, indenter) pairs and carve off a test share."""
    combos = list(itertools.product(spec.indicators, spec.indenters))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC0]))
    perm = rng.permutation(len(combos))
    combos = [combos[i] for i in perm]
    if spec.n_test == 0:
        return combos, []
    k = int(round(len(combos) * spec.n_test / spec.n))
    k = min(max(k, 1), len(combos) - 1)
    return combos[k:], combos[:k]


def record_plan(spec: DatasetSpec) -> list[dict]:
    train, test = split_combinations(spec)
    grid = len(train + test) * B_STEPS_PER_TURN * len(spec.axis_a_choices) * len(spec.axis_c_choices)
    if spec.n > grid:
        log.warning("requested %d records but the pose grid has %d entries; poses will repeat", spec.n, grid)
    plan = []
    for i in range(spec.n):
        split = "train" if i < spec.n_train else "test"
        pool = train if split == "train" else test
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        ind, tool = pool[int(rng.integers(len(pool)))]
        plan.append({
            "id": i,
            "split": split,
            "indicator": int(ind),
            "indenter": int(tool),
            "axis_a": float(spec.axis_a_choices[int(rng.integers(len(spec.axis_a_choices)))]),
            "axis_b": float(spec.axis_b_step_deg * int(rng.integers(B_STEPS_PER_TURN))),
            "axis_c": float(spec.axis_c_choices[int(rng.integers(len(spec.axis_c_choices)))]),
            "press": float(rng.uniform(*spec.press_range)),
            "indent_depth": float(rng.uniform(*spec.indent_range)),
            "noise_seed": int(rng.integers(2**31 - 1)),
        })
    return plan


def render_record(entry: dict, cal: Calibration, spec: DatasetSpec, lights=None):
    scene = build_press_scene(entry["indicator"], entry["indenter"], entry["axis_a"], entry["axis_b"],
                              entry["axis_c"], entry["press"], entry["indent_depth"],
                              cal.model.hemisphere_radius)
    trace = trace_scene(scene, cal.table, cal.model)
    depth = depth_from_trace(trace, cal.model)
    lights = default_lights(cal.model) if lights is None else lights
    image = image_from_trace(trace, lights, ShadingParams(), spec.noise_std, entry["noise_seed"])
    return image, depth


def generate_dataset(cal: Calibration, spec: DatasetSpec, out, workers: int = 1) -> dict:
    """Write ``spec.n`` records under ``out`` and return the manifest."""
    out = Path(out)
    plan = record_plan(spec)
    with exclusive_lock(out):
        for sub in ("images", "depth", "meta"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        write_png(out / "mask.png", cal.table.valid.astype(np.uint8) * 255)

        def one(entry):
            image, depth = render_record(entry, cal, spec)
            name = f"{entry['id']:06d}"
            write_png(out / "images" / f"{name}.png", to_uint8(image))
            write_png(out / "depth" / f"{name}.png", depth.codes)
            meta = dict(entry, indicator_name=INDICATORS[entry["indicator"]].name,
                        indenter_name=INDENTERS[entry["indenter"]].name)
            write_json(out / "meta" / f"{name}.json", meta)
            return {"id": entry["id"], "split": entry["split"], "image": f"images/{name}.png",
                    "depth": f"depth/{name}.png", "meta": f"meta/{name}.json",
                    "combination": [entry["indicator"], entry["indenter"]]}

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                records = list(pool.map(one, plan))
        else:
            records = [one(e) for e in plan]
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "version": MANIFEST_VERSION,
            "seed": spec.seed,
            "spec": spec.to_dict(),
            "calibration_hash": cal.document()["content_hash"],
            "sensor": cal.model.to_dict(),
            "mask": "mask.png",
            "split": {"train": spec.n_train, "test": spec.n_test},
            "records": records,
        }
        write_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class LoadedDataset:
    images: np.ndarray   # (N, H, W, 3) float32 in [0, 1]
    depth: np.ndarray    # (N, H, W) uint8 codes
    valid: np.ndarray    # (H, W) bool
    split: np.ndarray    # (N,) "train" / "test"
    manifest: dict

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def load_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset manifest {mpath}: {exc}") from exc
    if manifest.get("schema") != MANIFEST_SCHEMA or manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath} is not a version-{MANIFEST_VERSION} dataset manifest")
    return manifest


def load_dataset(path) -> LoadedDataset:
    root = Path(path)
    manifest = load_manifest(root)
    recs = manifest["records"]
    if len(recs) != manifest["split"]["train"] + manifest["split"]["test"]:
        raise DatasetError("manifest split counts do not match its record list")
    valid = read_image(root / manifest["mask"]) > 0
    images, depth = [], []
    for r in recs:
        try:
            img = read_image(root / r["image"])
            dep = read_image(root / r["depth"])
        except Exception as exc:
            raise DatasetError(f"record {r['id']}: {exc}") from exc
        if img.shape[:2] != valid.shape or dep.shape != valid.shape:
            raise DatasetError(f"record {r['id']} does not match the dataset crop geometry")
        images.append(img)
        depth.append(dep)
    return LoadedDataset(np.stack(images).astype(np.float32) / 255.0, np.stack(depth), valid,
                         np.array([r["split"] for r in recs]), manifest)
