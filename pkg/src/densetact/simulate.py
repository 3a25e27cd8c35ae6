"""Press scenes, ray-cast depth labels, surface normals and a photometric renderer.

Depth labels follow a rigid-contact model: along each pixel ray the pressed
surface sits at the nearest scene hit, never farther out than the rest
hemisphere. The renderer is an explicit stand-in for the sensor's unknown
reflectance: three colored point lights near the elastomer base, Lambertian
plus Blinn-Phong shading with a softened inverse-square falloff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibration import CorrespondenceTable
from .errors import OverPressError
from .geometry import RigidPose
from .mesh import TriangleMesh
from .raycast import BvhIndex, build_bvh, cast_rays
from .sensor import DepthMap, SensorModel, encode_depth

OVERPRESS_MARGIN = 0.1
SPECULAR_EXPONENT = 16.0


@dataclass(frozen=True, eq=False)
class PlacedMesh:
    """Mesh in its own frame plus the pose taking it into the sensor frame."""

    mesh: TriangleMesh
    pose: RigidPose = field(default_factory=RigidPose.identity)
    label: str = ""
    index: Optional[BvhIndex] = None

    def __post_init__(self):
        if self.index is None:
            object.__setattr__(self, "index", build_bvh(self.mesh))


@dataclass(frozen=True, eq=False)
class PressScene:
    parts: tuple
    axis_angles: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        parts = tuple(p if isinstance(p, PlacedMesh) else PlacedMesh(p) if isinstance(p, TriangleMesh)
                      else PlacedMesh(*p) for p in self.parts)
        if not parts:
            raise ValueError("a press scene needs at least one mesh")
        object.__setattr__(self, "parts", parts)
        object.__setattr__(self, "axis_angles", tuple(float(a) for a in self.axis_angles))

    def without(self, label: str) -> "PressScene":
        return PressScene(tuple(p for p in self.parts if p.label != label), self.axis_angles)


@dataclass(frozen=True, eq=False)
class SurfaceTrace:
    """Per-pixel radial distance, surface point and inward normal (valid pixels only)."""

    r_ray: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    hit_part: np.ndarray
    directions: np.ndarray
    valid: np.ndarray


def trace_directions(scene: PressScene, directions: np.ndarray, rest_radius: float):
    """Nearest surface along unit rays from the sensor origin.

    Rays that miss every mesh, or hit beyond ``rest_radius``, land on the rest
    hemisphere. Normals are oriented toward the origin.
    """
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(d)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_part = np.full(n, -1, dtype=np.int64)
    for k, part in enumerate(scene.parts):
        rot, trans = part.pose.rotation, part.pose.translation
        o_local = -(rot.T @ trans)
        d_local = d @ rot
        hits = cast_rays(part.index, o_local[None], d_local)
        closer = hits.t < best_t
        best_t = np.where(closer, hits.t, best_t)
        best_part = np.where(closer, k, best_part)
        face_n = part.mesh.normals[np.maximum(hits.face, 0)] @ rot.T
        best_n = np.where(closer[:, None], face_n, best_n)
    rest = best_t >= rest_radius
    r_ray = np.where(rest, rest_radius, best_t)
    best_part = np.where(rest, -1, best_part)
    normals = np.where(rest[:, None], -d, best_n)
    flip = np.einsum("ij,ij->i", normals, d) > 0
    normals = np.where(flip[:, None], -normals, normals)
    return r_ray, r_ray[:, None] * d, normals, best_part


def trace_scene(scene: PressScene, table: CorrespondenceTable, model: SensorModel) -> SurfaceTrace:
    dirs = table.directions()
    r_ray, pts, nrm, part = trace_directions(scene, dirs, model.hemisphere_radius)
    return SurfaceTrace(r_ray, pts, nrm, part, dirs, table.valid)


def _scatter(valid: np.ndarray, values: np.ndarray, fill=0.0) -> np.ndarray:
    out = np.full(valid.shape + values.shape[1:], fill, dtype=values.dtype)
    out[valid] = values
    return out


def depth_from_trace(trace: SurfaceTrace, model: SensorModel) -> DepthMap:
    dep = model.hemisphere_radius - trace.r_ray
    worst = float(dep.max(initial=0.0))
    if worst > model.max_depression + OVERPRESS_MARGIN:
        raise OverPressError(
            f"scene presses {worst:.3f} mm, beyond the {model.max_depression} mm limit "
            f"(+{OVERPRESS_MARGIN} mm tolerance)", worst)
    codes = encode_depth(np.clip(dep, 0.0, model.max_depression), model)
    return DepthMap(_scatter(trace.valid, np.atleast_1d(codes).astype(np.uint8)), trace.valid, model.max_depression)


def ground_truth_depth(scene: PressScene, table: CorrespondenceTable, model: SensorModel) -> DepthMap:
    """Ray-cast depression label for every valid pixel, 8-bit encoded."""
    return depth_from_trace(trace_scene(scene, table, model), model)


@dataclass(frozen=True, eq=False)
class SurfaceNormalMap:
    normals: np.ndarray
    valid: np.ndarray


def surface_normals(scene: PressScene, table: CorrespondenceTable, model: SensorModel) -> SurfaceNormalMap:
    trace = trace_scene(scene, table, model)
    return SurfaceNormalMap(_scatter(trace.valid, trace.normals), trace.valid)


@dataclass(frozen=True)
class LightSpec:
    position: tuple
    color: tuple
    intensity: float = 1.0


def default_lights(model: SensorModel, intensity: float = 0.9, white: bool = False) -> tuple:
    """Three point lights 120 degrees apart just above the elastomer base."""
    ring = 0.8 * model.hemisphere_radius
    colors = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
    lights = []
    for k in range(3):
        a = np.deg2rad(90.0 + 120.0 * k)
        col = (1.0, 1.0, 1.0) if white else colors[k]
        lights.append(LightSpec((ring * np.cos(a), ring * np.sin(a), 2.0), col, intensity))
    return tuple(lights)


@dataclass(frozen=True)
class ShadingParams:
    ambient: tuple = (0.05, 0.05, 0.05)
    diffuse: float = 1.0
    specular: float = 0.25
    falloff_distance: float = 12.5


def shade(points: np.ndarray, normals: np.ndarray, lights: Sequence[LightSpec],
          params: ShadingParams = ShadingParams()) -> np.ndarray:
    """RGB radiance for surface points seen from the origin; (N, 3) in [0, 1]."""
    out = np.tile(np.asarray(params.ambient, dtype=np.float64), (len(points), 1))
    view = -points / np.linalg.norm(points, axis=1, keepdims=True)
    for light in lights:
        to_l = np.asarray(light.position, dtype=np.float64) - points
        dist = np.linalg.norm(to_l, axis=1, keepdims=True)
        l_hat = to_l / dist
        fall = 1.0 / (1.0 + (dist[:, 0] / params.falloff_distance) ** 2)
        lam = np.maximum(0.0, np.einsum("ij,ij->i", normals, l_hat))
        h = l_hat + view
        h /= np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        spec = np.where(lam > 0, np.maximum(0.0, np.einsum("ij,ij->i", normals, h)) ** SPECULAR_EXPONENT, 0.0)
        term = light.intensity * fall * (params.diffuse * lam + params.specular * spec)
        out += term[:, None] * np.asarray(light.color, dtype=np.float64)[None, :]
    return np.clip(out, 0.0, 1.0)


def image_from_trace(trace: SurfaceTrace, lights, params: ShadingParams = ShadingParams(),
                     noise_std: float = 0.0, seed: Optional[int] = None) -> np.ndarray:
    rgb = shade(trace.points, trace.normals, lights, params)
    img = _scatter(trace.valid, rgb)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        img = np.where(trace.valid[..., None], img + rng.normal(0.0, noise_std, img.shape), 0.0)
        img = np.clip(img, 0.0, 1.0)
    return img


def render_sensor_image(scene: PressScene, table: CorrespondenceTable, model: SensorModel,
                        lights=None, params: ShadingParams = ShadingParams(),
                        noise_std: float = 0.0, seed: Optional[int] = None) -> np.ndarray:
    """Synthetic interior image (H, W, 3) with values in [0, 1]; invalid pixels are black."""
    lights = default_lights(model) if lights is None else lights
    return image_from_trace(trace_scene(scene, table, model), lights, params, noise_std, seed)
