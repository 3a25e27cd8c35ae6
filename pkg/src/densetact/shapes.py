"""Procedural triangle meshes: spheres, hemispherical shells with holes, indenters."""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere with ``20 * 4**subdivisions`` outward-facing triangles."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def uv_sphere(radius: float, n_theta: int = 48, n_psi: int = 96, theta_max: float = np.pi,
              center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Latitude/longitude sphere (or cap up to ``theta_max``), normals facing outward."""
    return TriangleMesh.from_triangles(
        _cap_triangles(radius, n_theta, n_psi, theta_max) + np.asarray(center, dtype=np.float64))


def _cap_triangles(radius, n_theta, n_psi, theta_max, keep=None):
    th = np.linspace(0.0, theta_max, n_theta + 1)
    ps = np.linspace(0.0, 2 * np.pi, n_psi + 1)
    tris = []
    for i in range(n_theta):
        for j in range(n_psi):
            t0, t1, p0, p1 = th[i], th[i + 1], ps[j], ps[j + 1]
            if keep is not None and not keep(0.5 * (t0 + t1), 0.5 * (p0 + p1)):
                continue
            a = _sph(radius, t0, p0)
            b = _sph(radius, t0, p1)
            c = _sph(radius, t1, p0)
            d = _sph(radius, t1, p1)
            if i > 0:
                tris.append((a, c, b))
            tris.append((b, c, d))
    return np.array(tris, dtype=np.float64).reshape(-1, 3, 3)


def _sph(r, t, p):
    return (r * np.sin(t) * np.cos(p), r * np.sin(t) * np.sin(p), r * np.cos(t))


def hemisphere_shell(inner_radius: float, thickness: float = 2.0, holes=(),
                     n_theta: int = 36, n_psi: int = 96, theta_max: float = np.pi / 2) -> TriangleMesh:
    """Hemispherical shell open toward -z, optionally pierced by circular holes.

    ``holes`` is a sequence of ``(theta, psi, angular_radius)`` in radians; grid
    cells whose center lies within the angular radius of the hole axis are
    removed from both walls. Inner wall normals face the shell center.
    """
    axes = [(np.array(_sph(1.0, t, p)), np.cos(a)) for t, p, a in holes]

    def keep(t, p):
        d = np.array(_sph(1.0, t, p))
        return all(d @ ax < ca for ax, ca in axes)

    inner = _cap_triangles(inner_radius, n_theta, n_psi, theta_max, keep)[:, ::-1]
    outer = _cap_triangles(inner_radius + thickness, n_theta, n_psi, theta_max, keep)
    return TriangleMesh.from_triangles(np.concatenate([inner, outer]))


def cone(base_radius: float, height: float, segments: int = 48) -> TriangleMesh:
    """Closed cone with apex at the origin pointing to -z and base at z=+height."""
    ang = np.linspace(0.0, 2 * np.pi, segments + 1)[:-1]
    ring = np.stack([base_radius * np.cos(ang), base_radius * np.sin(ang), np.full(segments, height)], 1)
    apex = np.zeros(3)
    top = np.array([0.0, 0.0, height])
    tris = []
    for j in range(segments):
        a, b = ring[j], ring[(j + 1) % segments]
        tris.append((apex, b, a))
        tris.append((top, a, b))
    return TriangleMesh.from_triangles(np.array(tris))


def cylinder(radius: float, length: float, segments: int = 48) -> TriangleMesh:
    """Closed cylinder along +z from z=0 to z=length."""
    ang = np.linspace(0.0, 2 * np.pi, segments + 1)[:-1]
    lo = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)], 1)
    hi = lo + np.array([0.0, 0.0, length])
    c0, c1 = np.zeros(3), np.array([0.0, 0.0, length])
    tris = []
    for j in range(segments):
        k = (j + 1) % segments
        tris += [(lo[j], lo[k], hi[j]), (lo[k], hi[k], hi[j]), (c0, lo[k], lo[j]), (c1, hi[j], hi[k])]
    return TriangleMesh.from_triangles(np.array(tris))


def box(half_extents) -> TriangleMesh:
    """Axis-aligned closed box centered at the origin."""
    hx, hy, hz = half_extents
    v = np.array([[x, y, z] for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    f = np.array([(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
                  (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)])
    return TriangleMesh(v, f)


def capsule_ridge(radius: float, length: float, segments: int = 32, rings: int = 12) -> TriangleMesh:
    """Rounded ridge: a cylinder along x with hemispherical caps."""
    half = length / 2.0
    tris = []
    ang = np.linspace(0.0, 2 * np.pi, segments + 1)
    lat = np.linspace(0.0, np.pi / 2, rings + 1)

    def cap_pt(side, la, a):
        if la == lat[-1]:
            return (side * (half + radius), 0.0, 0.0)
        return (side * (half + radius * np.sin(la)), radius * np.cos(la) * np.cos(a), radius * np.cos(la) * np.sin(a))

    for j in range(segments):
        a0, a1 = ang[j], ang[j + 1]
        p00 = (-half, radius * np.cos(a0), radius * np.sin(a0))
        p01 = (-half, radius * np.cos(a1), radius * np.sin(a1))
        p10 = (half, radius * np.cos(a0), radius * np.sin(a0))
        p11 = (half, radius * np.cos(a1), radius * np.sin(a1))
        tris += [(p00, p10, p11), (p00, p11, p01)]
        for side in (-1.0, 1.0):
            for i in range(rings):
                q00, q01 = cap_pt(side, lat[i], a0), cap_pt(side, lat[i], a1)
                q10, q11 = cap_pt(side, lat[i + 1], a0), cap_pt(side, lat[i + 1], a1)
                quad = [(q00, q10, q11), (q00, q11, q01)] if i < rings - 1 else [(q00, q10, q01)]
                tris += quad if side > 0 else [t[::-1] for t in quad]
    return TriangleMesh.from_triangles(np.array(tris))


def plane_quad(z: float, half_size: float) -> TriangleMesh:
    """Square in the plane ``z`` covering the z axis."""
    h = half_size
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]], dtype=np.float64)
    return TriangleMesh(v, np.array([(0, 1, 2), (0, 2, 3)]))
