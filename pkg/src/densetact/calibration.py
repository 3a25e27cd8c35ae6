"""Fisheye correspondence: saw-tooth edge detection, pixel -> (theta, psi) table,
and the calibration file / table sidecar formats."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import AlignmentError, CalibrationError, FormatError
from .gp import GpCorrespondence, GpHyper, fit_gp
from .sensor import SensorModel

CALIBRATION_FORMAT = "densetact-calibration"
CALIBRATION_VERSION = 1
TABLE_MAGIC = b"DTCT"
TABLE_VERSION = 1
_TABLE_RECORD = np.dtype([("theta", "<f4"), ("psi", "<f4"), ("valid", "u1")])
RATIO_TOL = 1e-6


# -- saw-tooth edges ----------------------------------------------------------

def _radial_profile(gray: np.ndarray, uc: float, vc: float, band: int = 1):
    """Intensity along the +u axis, sampled at pixel columns right of center.

    Rows are interpolated linearly at ``vc`` and averaged over ``±band`` rows
    to suppress pixel noise. Also returns the RMS row offset of the samples,
    used to convert a column offset into a true radius.
    """
    h, w = gray.shape
    cols = np.arange(int(math.floor(uc)) + 1, w)
    if uc == math.floor(uc):
        cols = np.arange(int(uc), w)
    rows, dv2 = [], []
    for off in range(-band, band + 1):
        v = vc + off
        v0 = int(math.floor(v))
        fv = v - v0
        v0c, v1c = min(max(v0, 0), h - 1), min(max(v0 + 1, 0), h - 1)
        rows.append((1.0 - fv) * gray[v0c, cols] + fv * gray[v1c, cols])
        dv2.append((1.0 - fv) * (v0 - vc) ** 2 + fv * (v0 + 1 - vc) ** 2)
    return cols - uc, np.mean(rows, axis=0), math.sqrt(float(np.mean(dv2)))


def detect_sawtooth_edges(image, model: SensorModel, tooth_interval_deg: float = 5.0,
                          min_edges: int = 4, max_radius: Optional[float] = None, band: int = 1):
    """Locate saw-tooth edges along the +u axis and pair them with tooth angles.

    A 1-D Canny: central-difference gradient magnitude, non-maximum
    suppression, hysteresis with high = 0.2 and low = 0.1 of the peak
    gradient, then parabolic sub-pixel refinement. ``image`` is a crop-sized
    array (gray or RGB). Returns ``[(r_px, theta_rad), ...]`` with
    ``theta = k * interval`` for k = 1..n.
    """
    if tooth_interval_deg <= 0:
        raise ValueError("tooth interval must be positive")
    img = np.asarray(image, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    if gray.shape != (model.crop_size, model.crop_size):
        raise CalibrationError(f"calibration image must be the {model.crop_size}px crop, got {gray.shape}")
    uc, vc = model.crop_center
    r, prof, dv_rms = _radial_profile(gray, uc, vc, band)
    g = np.zeros_like(prof)
    g[1:-1] = 0.5 * np.abs(prof[2:] - prof[:-2])
    gmax = g.max()
    if gmax <= 1e-12:
        raise CalibrationError("no intensity edges found along the calibration axis")
    high, low = 0.2 * gmax, 0.1 * gmax
    n = len(g)
    peak = np.zeros(n, dtype=bool)
    for i in range(1, n - 1):
        peak[i] = g[i] > low and g[i] >= g[i - 1] and g[i] > g[i + 1]
    # hysteresis: keep peaks that are strong or joined to a strong pixel by a run above ``low``
    above = g >= low
    keep = np.zeros(n, dtype=bool)
    i = 0
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j < n and above[j]:
            j += 1
        if g[i:j].max() >= high:
            keep[i:j] = peak[i:j]
        i = j
    edges = []
    for i in np.flatnonzero(keep):
        a, b, c = g[i - 1], g[i], g[i + 1]
        den = a - 2 * b + c
        off = 0.5 * (a - c) / den if den != 0 else 0.0
        ri = math.hypot(r[i] + float(np.clip(off, -0.5, 0.5)), dv_rms)
        if max_radius is None or ri <= max_radius:
            edges.append(ri)
    if len(edges) < min_edges:
        raise CalibrationError(f"found {len(edges)} saw-tooth edges, need at least {min_edges}")
    if np.any(np.diff(edges) <= 0):
        raise AlignmentError("detected edge radii are not strictly increasing; check indicator alignment")
    step = math.radians(tooth_interval_deg)
    return [(float(ri), (k + 1) * step) for k, ri in enumerate(edges)]


def render_sawtooth_image(model: SensorModel, edge_radii, levels=(0.25, 0.75), band_halfwidth: float = 4.0,
                          background: float = 0.5, supersample: int = 8) -> np.ndarray:
    """Synthetic gray calibration image: alternating bands whose boundaries sit
    at ``edge_radii`` (pixels) along the +u axis, box-filtered per pixel."""
    size = model.crop_size
    uc, vc = model.crop_center
    edges = np.sort(np.asarray(edge_radii, dtype=np.float64))
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    u = (np.arange(size)[:, None] + sub[None, :]).ravel()
    uu, vv = np.meshgrid(u, u)
    rr = np.hypot(uu - uc, vv - vc)
    band_idx = np.searchsorted(edges, rr, side="right")
    val = np.where(band_idx % 2 == 0, levels[0], levels[1])
    strip = np.abs(vv - vc) <= band_halfwidth
    val = np.where(strip, val, background)
    return val.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def equidistant_edge_radii(model: SensorModel, tooth_interval_deg: float, n_teeth: int,
                           fov_deg: float = 185.0) -> np.ndarray:
    """Edge radii for an ideal equidistant fisheye whose image circle spans the crop."""
    f = (model.crop_size / 2.0) / math.radians(fov_deg / 2.0)
    return f * np.radians(tooth_interval_deg) * np.arange(1, n_teeth + 1)


def calibration_samples(edges, model: SensorModel, include_center: bool = True) -> np.ndarray:
    """GP training pairs ``(r, R0 sin θ)`` from detected edges; the image
    center is pinned to θ = 0 when ``include_center``."""
    pairs = [(r, model.hemisphere_radius * math.sin(t)) for r, t in edges]
    if include_center:
        pairs.insert(0, (0.0, 0.0))
    return np.array(pairs)


# -- correspondence -----------------------------------------------------------

def pixel_to_spherical(model: SensorModel, gp: GpCorrespondence, u, v):
    """Crop pixel -> (theta, psi, valid).

    Invalid where the pixel radius leaves the calibrated radius range, where
    ``f_GP(r) / R0`` exceeds 1 + 1e-6, or at the exact image center.
    Accepts scalars or arrays.
    """
    uc, vc = model.crop_center
    du = np.asarray(u, dtype=np.float64) - uc
    dv = np.asarray(v, dtype=np.float64) - vc
    r = np.hypot(du, dv)
    ratio = gp.predict(r) / model.hemisphere_radius
    theta = np.arcsin(np.clip(ratio, 0.0, 1.0))
    psi = np.arctan2(dv, du)
    psi = np.where(psi == -np.pi, np.pi, psi)
    valid = (r > 0) & (r >= gp.r_min) & (r <= gp.r_max) & (ratio <= 1.0 + RATIO_TOL)
    if theta.ndim == 0:
        return float(theta), float(psi), bool(valid)
    return theta, psi, valid


@dataclass(frozen=True, eq=False)
class CorrespondenceTable:
    theta: np.ndarray
    psi: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        for name in ("theta", "psi", "valid"):
            arr = getattr(self, name)
            arr = np.array(arr, dtype=bool if name == "valid" else np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (self.theta.shape == self.psi.shape == self.valid.shape):
            raise ValueError("table arrays must share one shape")

    @property
    def height(self) -> int:
        return self.theta.shape[0]

    @property
    def width(self) -> int:
        return self.theta.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def directions(self) -> np.ndarray:
        """(N, 3) unit rays for the valid pixels in row-major order."""
        t = self.theta[self.valid]
        p = self.psi[self.valid]
        st = np.sin(t)
        return np.stack([st * np.cos(p), st * np.sin(p), np.cos(t)], axis=1)

    def to_bytes(self) -> bytes:
        rec = np.zeros(self.theta.size, dtype=_TABLE_RECORD)
        rec["theta"] = self.theta.ravel()
        rec["psi"] = self.psi.ravel()
        rec["valid"] = self.valid.ravel()
        return TABLE_MAGIC + struct.pack("<III", TABLE_VERSION, self.width, self.height) + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CorrespondenceTable":
        if data[:4] != TABLE_MAGIC:
            raise FormatError("not a correspondence table (bad magic)")
        version, w, h = struct.unpack_from("<III", data, 4)
        if version != TABLE_VERSION:
            raise FormatError(f"unsupported table version {version}")
        need = 16 + w * h * _TABLE_RECORD.itemsize
        if len(data) != need:
            raise FormatError(f"table payload is {len(data)} bytes, expected {need}")
        rec = np.frombuffer(data, dtype=_TABLE_RECORD, offset=16).reshape(h, w)
        return _canonical_table(rec["theta"], rec["psi"], rec["valid"] != 0)


def _canonical_table(theta, psi, valid) -> CorrespondenceTable:
    # float32-rounded so a freshly built table equals one read back from disk
    theta = np.asarray(theta, dtype=np.float32).astype(np.float64)
    psi = np.minimum(np.asarray(psi, dtype=np.float32).astype(np.float64), np.pi)
    valid = np.asarray(valid, dtype=bool) & (theta >= 0) & (theta < np.pi / 2) & (psi > -np.pi)
    return CorrespondenceTable(np.where(valid, theta, 0.0), np.where(valid, psi, 0.0), valid)


def build_correspondence_table(model: SensorModel, gp: GpCorrespondence) -> CorrespondenceTable:
    size = model.crop_size
    vv, uu = np.mgrid[0:size, 0:size].astype(np.float64)
    theta, psi, valid = pixel_to_spherical(model, gp, uu, vv)
    return _canonical_table(theta, psi, valid)


def spherical_to_pixel(model: SensorModel, gp: GpCorrespondence, theta, psi):
    """Inverse projection (GP inverted by bisection over the calibrated range)."""
    y = model.hemisphere_radius * np.sin(np.asarray(theta, dtype=np.float64))
    r = gp.inverse(y)
    uc, vc = model.crop_center
    return r * np.cos(psi) + uc, r * np.sin(psi) + vc


# -- calibration file ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Calibration:
    model: SensorModel
    gp: GpCorrespondence
    table: CorrespondenceTable
    tooth_interval_deg: float = 5.0

    def document(self) -> dict:
        doc = {
            "format": CALIBRATION_FORMAT,
            "version": CALIBRATION_VERSION,
            "sensor": self.model.to_dict(),
            "tooth_interval_deg": self.tooth_interval_deg,
            "gp": {
                "r": self.gp.r.tolist(),
                "y": self.gp.y.tolist(),
                "signal_var": self.gp.hyper.signal_var,
                "length_scale": self.gp.hyper.length_scale,
                "noise_var": self.gp.hyper.noise_var,
                "log_marginal_likelihood": self.gp.log_marginal_likelihood,
            },
            "valid_pixels": self.table.valid_count,
        }
        doc["content_hash"] = content_hash(doc)
        return doc


def content_hash(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "content_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def calibrate(model: SensorModel, samples, hyper: Optional[GpHyper] = None, optimize: bool = True,
              tooth_interval_deg: float = 5.0) -> Calibration:
    gp = fit_gp(samples, hyper=hyper, optimize=optimize)
    return Calibration(model, gp, build_correspondence_table(model, gp), tooth_interval_deg)


def save_calibration(cal: Calibration, path) -> dict:
    """Write ``path`` (JSON) and ``path`` + ``.table`` (DTCT sidecar)."""
    path = Path(path)
    doc = cal.document()
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    Path(str(path) + ".table").write_bytes(cal.table.to_bytes())
    return doc


def load_calibration(path) -> Calibration:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read calibration file {path}: {exc}") from exc
    if doc.get("format") != CALIBRATION_FORMAT or doc.get("version") != CALIBRATION_VERSION:
        raise FormatError(f"{path} is not a version-{CALIBRATION_VERSION} calibration file")
    if doc.get("content_hash") != content_hash(doc):
        raise FormatError(f"{path} content hash mismatch")
    model = SensorModel.from_dict(doc["sensor"])
    g = doc["gp"]
    hyper = GpHyper(g["signal_var"], g["length_scale"], g["noise_var"])
    gp = fit_gp(np.c_[g["r"], g["y"]], hyper=hyper)
    sidecar = Path(str(path) + ".table")
    if sidecar.exists():
        table = CorrespondenceTable.from_bytes(sidecar.read_bytes())
        if table.width != model.crop_size or table.height != model.crop_size:
            table = build_correspondence_table(model, gp)
    else:
        table = build_correspondence_table(model, gp)
    return Calibration(model, gp, table, doc.get("tooth_interval_deg", 5.0))
