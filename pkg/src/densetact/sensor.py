"""Sensor geometry and 8-bit depression quantization."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DepthRangeError, GeometryMismatchError


@dataclass(frozen=True)
class SensorModel:
    """Fixed geometry of the hemispherical sensor and its camera crop.

    ``center_u``/``center_v`` are in raw-image pixel coordinates (integer
    values are pixel centers). The square crop of side ``crop_size`` is
    placed so that the center falls at the same sub-pixel position inside it.
    """

    hemisphere_radius: float = 25.0
    sensor_height: float = 35.0
    max_depression: float = 9.4
    image_width: int = 64
    image_height: int = 64
    center_u: float = 31.5
    center_v: float = 31.5
    crop_size: int = 64

    def __post_init__(self):
        if not 0.0 < self.max_depression < self.hemisphere_radius:
            raise ValueError("max_depression must lie in (0, hemisphere_radius)")
        if not (0.0 <= self.center_u <= self.image_width - 1 and 0.0 <= self.center_v <= self.image_height - 1):
            raise ValueError("center must lie inside the image")
        if self.crop_size < 1 or self.crop_size > min(self.image_width, self.image_height):
            raise ValueError("crop_size must fit inside the image")
        u0, v0 = self.crop_origin
        if u0 < 0 or v0 < 0 or u0 + self.crop_size > self.image_width or v0 + self.crop_size > self.image_height:
            raise ValueError("crop window around the center leaves the image")

    @property
    def depth_scale(self) -> float:
        """Millimeters per depth code."""
        return self.max_depression / 255.0

    @property
    def crop_origin(self) -> tuple[int, int]:
        half = self.crop_size / 2.0
        return int(np.floor(self.center_u + 0.5 - half)), int(np.floor(self.center_v + 0.5 - half))

    @property
    def crop_center(self) -> tuple[float, float]:
        u0, v0 = self.crop_origin
        return self.center_u - u0, self.center_v - v0

    def crop(self, image: np.ndarray) -> np.ndarray:
        if image.shape[0] != self.image_height or image.shape[1] != self.image_width:
            raise GeometryMismatchError(
                f"image is {image.shape[1]}x{image.shape[0]}, sensor expects "
                f"{self.image_width}x{self.image_height}")
        u0, v0 = self.crop_origin
        return image[v0:v0 + self.crop_size, u0:u0 + self.crop_size]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        return cls(**d)


def encode_depth(d, model: SensorModel):
    """Depression in mm -> 8-bit code, ``round(d * 255 / D)`` with halves rounded up."""
    arr = np.asarray(d, dtype=np.float64)
    dmax = model.max_depression
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > dmax):
        bad = arr[~((arr >= 0.0) & (arr <= dmax))]
        raise DepthRangeError(f"depression {bad.flat[0]!r} mm outside [0, {dmax}] mm")
    code = np.floor(arr / dmax * 255.0 + 0.5).astype(np.uint8)
    return int(code) if code.ndim == 0 else code


def decode_depth(code, model: SensorModel):
    arr = np.asarray(code, dtype=np.float64)
    out = arr * model.max_depression / 255.0
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class DepthMap:
    """8-bit radial depression image with a validity mask.

    Invalid pixels always carry code 0.
    """

    codes: np.ndarray
    valid: np.ndarray
    max_depression: float

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.dtype != np.uint8:
            raise TypeError("depth codes must be uint8")
        valid = np.asarray(self.valid, dtype=bool)
        if codes.shape != valid.shape or codes.ndim != 2:
            raise GeometryMismatchError("codes and validity mask must be equal 2-D shapes")
        codes = np.where(valid, codes, 0).astype(np.uint8)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def scale(self) -> float:
        return self.max_depression / 255.0

    def depression_mm(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale

    def check_compatible(self, other: "DepthMap") -> None:
        if self.shape != other.shape or not np.array_equal(self.valid, other.valid):
            raise GeometryMismatchError("depth maps differ in crop geometry or valid mask")
