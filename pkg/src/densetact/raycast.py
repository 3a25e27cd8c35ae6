"""Nearest-hit ray casting against triangle meshes with a BVH.

The same Möller–Trumbore kernel serves both the BVH traversal and the
exhaustive scan, so the two paths return bitwise-identical hits. Ties at
equal distance go to the lowest face id. Kernels release the GIL; a built
index is read-only and can be queried from several threads at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .mesh import TriangleMesh

DET_EPS = 1e-9
LEAF_SIZE = 8
_BOX_PAD_REL = 1e-9


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0:
            raise ValueError("ray direction must be a finite non-zero vector")
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Hit:
    t: float
    face: int
    barycentric: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class BvhIndex:
    """Flattened binary BVH.

    Node ``i`` has box ``box_min[i]..box_max[i]``; inner nodes have children
    ``left[i]``/``right[i]``, leaves have ``left[i] == -1`` and own
    ``order[start[i]:start[i] + count[i]]``.
    """

    mesh: TriangleMesh
    triangles: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> BvhIndex:
    """Median split on the longest axis of the node's centroid bounds."""
    if mesh.is_empty:
        raise ValueError("cannot build a BVH over an empty mesh")
    tri = np.ascontiguousarray(mesh.triangles())
    tmin = tri.min(axis=1)
    tmax = tri.max(axis=1)
    cent = tri.mean(axis=1)
    scale = max(float(np.abs(tri).max()), 1.0)
    pad = _BOX_PAD_REL * scale

    order = np.arange(len(tri))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        idx = order[lo:hi]
        bmin.append(tmin[idx].min(axis=0) - pad)
        bmax.append(tmax[idx].max(axis=0) + pad)
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    root = new_node(0, len(tri))
    stack = [(root, 0, len(tri))]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= leaf_size:
            continue
        idx = order[lo:hi]
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        perm = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = idx[perm]
        mid = lo + (hi - lo) // 2
        l_node = new_node(lo, mid)
        r_node = new_node(mid, hi)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, mid, hi))
        stack.append((l_node, lo, mid))

    return BvhIndex(
        mesh=mesh,
        triangles=tri,
        box_min=np.array(bmin),
        box_max=np.array(bmax),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=order.astype(np.int64),
    )


@numba.njit(cache=True, nogil=True)
def _intersect(tri, f, ox, oy, oz, dx, dy, dz):
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    e1x, e1y, e1z = tri[f, 1, 0] - ax, tri[f, 1, 1] - ay, tri[f, 1, 2] - az
    e2x, e2y, e2z = tri[f, 2, 0] - ax, tri[f, 2, 1] - ay, tri[f, 2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-9:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= 0.0:
        return np.inf, 0.0, 0.0
    return t, u, v


@numba.njit(cache=True, nogil=True)
def _slab(lo, hi, o, d):
    # returns (entry, exit); NaN-free for axis-parallel rays
    t0 = -np.inf
    t1 = np.inf
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return np.inf, -np.inf
        else:
            inv = 1.0 / d[k]
            a = (lo[k] - o[k]) * inv
            b = (hi[k] - o[k]) * inv
            if a > b:
                a, b = b, a
            if a > t0:
                t0 = a
            if b < t1:
                t1 = b
    return t0, t1


@numba.njit(cache=True, nogil=True)
def _cast_bvh(tri, bmin, bmax, left, right, start, count, order, origins, dirs, out_t, out_f, out_u, out_v):
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        best_t = np.inf
        best_f = -1
        best_u = 0.0
        best_v = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            t0, t1 = _slab(bmin[node], bmax[node], o, d)
            if t0 > t1 or t1 < 0.0:
                continue
            # conservative pruning keeps equal-distance ties reachable
            if t0 > best_t * (1.0 + 1e-9) + 1e-12:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = order[k]
                    t, u, v = _intersect(tri, f, o[0], o[1], o[2], d[0], d[1], d[2])
                    if t < best_t or (t == best_t and t < np.inf and f < best_f):
                        best_t, best_f, best_u, best_v = t, f, u, v
            else:
                stack[sp] = right[node]
                sp += 1
                stack[sp] = left[node]
                sp += 1
        out_t[r] = best_t
        out_f[r] = best_f
        out_u[r] = best_u
        out_v[r] = best_v


@numba.njit(cache=True, nogil=True)
def _cast_exhaustive(tri, origins, dirs, out_t, out_f, out_u, out_v):
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        best_t = np.inf
        best_f = -1
        best_u = 0.0
        best_v = 0.0
        for f in range(tri.shape[0]):
            t, u, v = _intersect(tri, f, o[0], o[1], o[2], d[0], d[1], d[2])
            if t < best_t:
                best_t, best_f, best_u, best_v = t, f, u, v
        out_t[r] = best_t
        out_f[r] = best_f
        out_u[r] = best_u
        out_v[r] = best_v


@dataclass(frozen=True)
class RayBatchHits:
    """Per-ray results; ``face == -1`` and ``t == inf`` mark a miss."""

    t: np.ndarray
    face: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.face >= 0


def _prep(origins, directions):
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    if len(o) == 1 and len(d) > 1:
        o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    if o.shape != d.shape:
        raise ValueError("origins and directions must have matching shapes")
    n = len(o)
    return o, d, np.empty(n), np.empty(n, dtype=np.int64), np.empty(n), np.empty(n)


def cast_rays(index: BvhIndex, origins, directions) -> RayBatchHits:
    """Nearest hit for each ray (directions are expected to be unit length)."""
    o, d, t, f, u, v = _prep(origins, directions)
    _cast_bvh(index.triangles, index.box_min, index.box_max, index.left, index.right,
              index.start, index.count, index.order, o, d, t, f, u, v)
    return RayBatchHits(t, f, u, v)


def cast_rays_exhaustive(mesh_or_index, origins, directions) -> RayBatchHits:
    """Reference nearest hit by testing every triangle in face-id order."""
    tri = (mesh_or_index.triangles if isinstance(mesh_or_index, BvhIndex)
           else np.ascontiguousarray(mesh_or_index.triangles()))
    o, d, t, f, u, v = _prep(origins, directions)
    _cast_exhaustive(tri, o, d, t, f, u, v)
    return RayBatchHits(t, f, u, v)


def cast_ray(index: BvhIndex, ray: Ray) -> Optional[Hit]:
    res = cast_rays(index, ray.origin[None], ray.direction[None])
    if res.face[0] < 0:
        return None
    u, v = float(res.u[0]), float(res.v[0])
    return Hit(float(res.t[0]), int(res.face[0]), (1.0 - u - v, u, v))
