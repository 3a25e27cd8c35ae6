"""Procedural indicator shells and indenters, and press-scene assembly.

Indicators are hemispherical shells whose inner wall sits just outside the
rest surface, pierced by one or two holes. Indenters are built in a local
frame with their contact tip at the origin and the body along +z, then
seated in a hole so the tip protrudes a chosen depth into the sensor.
The whole assembly is rotated about axes A (x), C (y) and B (the optical
axis z), then pushed down the optical axis by the press depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import shapes
from .geometry import RigidPose, rot_x, rot_y, rot_z
from .mesh import TriangleMesh
from .simulate import PlacedMesh, PressScene

SHELL_N_THETA = 36
SHELL_N_PSI = 96
HOLE_RADIUS_DEG = 24.0


@dataclass(frozen=True)
class IndicatorSpec:
    name: str
    holes: tuple  # (theta_deg, psi_deg) per hole


@dataclass(frozen=True)
class IndenterSpec:
    name: str
    kind: str
    size: tuple


INDICATORS = (
    IndicatorSpec("one-hole-top", ((0.0, 0.0),)),
    IndicatorSpec("one-hole-20", ((20.0, 0.0),)),
    IndicatorSpec("one-hole-35", ((35.0, 60.0),)),
    IndicatorSpec("one-hole-50", ((50.0, 200.0),)),
    IndicatorSpec("two-hole-20-40", ((20.0, 0.0), (40.0, 180.0))),
    IndicatorSpec("two-hole-30-30", ((30.0, 90.0), (30.0, 270.0))),
    IndicatorSpec("two-hole-15-50", ((15.0, 300.0), (50.0, 120.0))),
    IndicatorSpec("two-hole-45-45", ((45.0, 0.0), (45.0, 120.0))),
)

INDENTERS = (
    IndenterSpec("sphere-8", "sphere", (8.0,)),
    IndenterSpec("sphere-11", "sphere", (11.0,)),
    IndenterSpec("cone-8x8", "cone", (8.0, 8.0)),
    IndenterSpec("cylinder-7", "cylinder", (7.0, 8.0)),
    IndenterSpec("ridge-3.5x10", "ridge", (3.5, 10.0)),
    IndenterSpec("sphere-6", "sphere", (6.0,)),
)


def shell_clearance(radius: float) -> float:
    """Outward offset that keeps every facet of the shell's inner wall at or
    beyond ``radius`` (faceting never presses the rest surface)."""
    dt = math.pi / 2 / SHELL_N_THETA
    dp = 2 * math.pi / SHELL_N_PSI
    half = 0.5 * math.hypot(dt, dp)
    return radius * (1.0 / math.cos(half) - 1.0) + 1e-6


@lru_cache(maxsize=None)
def indicator_mesh(indicator_id: int, rest_radius: float = 25.0) -> PlacedMesh:
    spec = INDICATORS[indicator_id]
    holes = [(math.radians(t), math.radians(p), math.radians(HOLE_RADIUS_DEG)) for t, p in spec.holes]
    mesh = shapes.hemisphere_shell(rest_radius + shell_clearance(rest_radius), 2.0, holes,
                                   SHELL_N_THETA, SHELL_N_PSI)
    return PlacedMesh(mesh, label=f"indicator:{spec.name}")


@lru_cache(maxsize=None)
def indenter_mesh(indenter_id: int) -> PlacedMesh:
    spec = INDENTERS[indenter_id]
    if spec.kind == "sphere":
        (rho,) = spec.size
        mesh = shapes.icosphere(rho, 3, center=(0.0, 0.0, rho))
    elif spec.kind == "cone":
        mesh = shapes.cone(*spec.size)
    elif spec.kind == "cylinder":
        mesh = shapes.cylinder(*spec.size)
    elif spec.kind == "ridge":
        rad, length = spec.size
        m = shapes.capsule_ridge(rad, length)
        mesh = TriangleMesh(m.vertices + np.array([0.0, 0.0, rad]), m.faces)
    else:
        raise ValueError(f"unknown indenter kind {spec.kind!r}")
    return PlacedMesh(mesh, label=f"indenter:{spec.name}")


def _seat_rotation(axis: np.ndarray) -> np.ndarray:
    """Rotation taking local +z onto ``axis``."""
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, axis)
    s = np.linalg.norm(v)
    c = float(z @ axis)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx * ((1.0 - c) / s ** 2)


def assembly_pose(axis_a: float, axis_b: float, axis_c: float, press: float) -> RigidPose:
    rot = rot_z(axis_b) @ rot_y(axis_c) @ rot_x(axis_a)
    return RigidPose(rot, np.array([0.0, 0.0, -press]))


def build_press_scene(indicator_id: int, indenter_id: int | None, axis_a: float = 0.0, axis_b: float = 0.0,
                      axis_c: float = 0.0, press: float = 0.0, indent_depth: float = 2.0,
                      rest_radius: float = 25.0) -> PressScene:
    """Indicator (and optionally one indenter per hole) placed in the sensor frame.

    ``press`` pushes the whole assembly along -z; ``indent_depth`` is how far
    each indenter tip reaches inside the rest radius before that push.
    """
    assembly = assembly_pose(axis_a, axis_b, axis_c, press)
    ind = indicator_mesh(indicator_id, rest_radius)
    parts = [PlacedMesh(ind.mesh, assembly, ind.label, ind.index)]
    if indenter_id is not None:
        tool = indenter_mesh(indenter_id)
        for t, p in INDICATORS[indicator_id].holes:
            t, p = math.radians(t), math.radians(p)
            axis = np.array([math.sin(t) * math.cos(p), math.sin(t) * math.sin(p), math.cos(t)])
            seat = RigidPose(_seat_rotation(axis), (rest_radius - indent_depth) * axis)
            parts.append(PlacedMesh(tool.mesh, assembly.compose(seat), tool.label, tool.index))
    return PressScene(tuple(parts), (axis_a, axis_b, axis_c))
