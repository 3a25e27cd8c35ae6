"""Small file-format helpers: 8-bit PNG/PGM images, canonical JSON, locks."""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import os
import threading
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .sensor import DepthMap, SensorModel


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    # no timestamps or ancillary chunks: output bytes depend only on pixels
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def read_image(path) -> np.ndarray:
    """8-bit PNG/PGM (or anything Pillow reads) as a uint8 array."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path} is not a readable image: {exc}") from exc


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def depth_metadata(model: SensorModel) -> dict:
    return {
        "max_depression_mm": model.max_depression,
        "mm_per_code": model.depth_scale,
        "crop_size": model.crop_size,
        "crop_center": list(model.crop_center),
        "crop_origin": list(model.crop_origin),
    }


def save_depth_map(depth: DepthMap, path, model: SensorModel) -> None:
    """Depth codes as 8-bit PNG (``.png``) or PGM (``.pgm``) plus ``<path>.json``."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, depth.codes)
    else:
        write_png(path, depth.codes)
    meta = depth_metadata(model)
    meta["valid_pixels"] = int(depth.valid.sum())
    write_json(str(path) + ".json", meta)


def load_depth_map(path, valid: np.ndarray, model: SensorModel) -> DepthMap:
    codes = read_image(path)
    if codes.ndim != 2:
        raise FormatError(f"{path} is not a single-channel depth image")
    return DepthMap(codes, valid, model.max_depression)


_held: dict = {}
_held_guard = threading.Lock()


@contextlib.contextmanager
def exclusive_lock(directory):
    """Hold ``<directory>/.lock`` exclusively while writing artifacts.

    Re-entrant per thread: nested calls on the same directory share the
    outer lock instead of deadlocking on a second descriptor. Other threads
    open their own descriptor and wait like another process would.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    key = (str(directory.resolve()), threading.get_ident())
    with _held_guard:
        if key in _held:
            _held[key][1] += 1
            fd = None
        else:
            fd = os.open(directory / ".lock", os.O_CREAT | os.O_RDWR, 0o644)
    if fd is not None:
        fcntl.flock(fd, fcntl.LOCK_EX)
        with _held_guard:
            _held[key] = [fd, 1]
    try:
        yield
    finally:
        with _held_guard:
            entry = _held[key]
            entry[1] -= 1
            release = entry[1] == 0
            if release:
                del _held[key]
        if release:
            fcntl.flock(entry[0], fcntl.LOCK_UN)
            os.close(entry[0])
