"""Indexed triangle meshes and STL (binary/ASCII) reading and writing.

Coordinates are millimeters. Vertices that are bitwise identical are merged
on load and zero-area facets are dropped, since they can never be a nearest
ray hit and have no defined normal.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DenseTactError

log = logging.getLogger(__name__)

_BINARY_HEADER = 80
_RECORD = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
assert _RECORD.itemsize == 50

NORMAL_TOL = 1e-9


class StlParseError(DenseTactError, ValueError):
    """Malformed STL payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.module, self.operation = "mesh_kernel", "parse_stl"
        self.offset = offset


class MeshValidationError(DenseTactError, ValueError):
    module, operation = "mesh_kernel", "parse_stl"


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    dropped_degenerate: int = 0
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("mesh has non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshValidationError("face index out of range")
        n = np.zeros((len(f), 3))
        if len(f):
            tri = v[f]
            cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
            norm = np.linalg.norm(cross, axis=1)
            if np.any(norm == 0):
                raise MeshValidationError("mesh contains zero-area faces")
            n = cross / norm[:, None]
        for a in (v, f, n):
            a.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "normals", n)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of per-face vertex positions."""
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def transformed(self, pose) -> "TriangleMesh":
        return TriangleMesh(pose.apply(self.vertices), self.faces)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[:, ::-1])

    @classmethod
    def from_triangles(cls, tri) -> "TriangleMesh":
        """Build from an (F, 3, 3) triangle soup, merging identical vertices."""
        return _from_soup(np.asarray(tri, dtype=np.float64).reshape(-1, 3, 3))

    @staticmethod
    def concatenate(meshes) -> "TriangleMesh":
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def _from_soup(tri: np.ndarray) -> TriangleMesh:
    if not np.all(np.isfinite(tri)):
        raise MeshValidationError("STL contains non-finite vertex coordinates")
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    keep = np.linalg.norm(cross, axis=1) > 0
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d degenerate (zero-area) facets", dropped)
    tri = tri[keep]
    flat = np.ascontiguousarray(tri.reshape(-1, 3))
    if len(flat) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), dropped)
    # merge on exact bit patterns, keeping first-occurrence order
    keys = flat.view(np.dtype((np.void, flat.dtype.itemsize * 3))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    vertices = flat[first[order]]
    faces = rank[inverse.ravel()].reshape(-1, 3)
    return TriangleMesh(vertices, faces, dropped)


def _looks_ascii(data: bytes) -> bool:
    if not data.lstrip().startswith(b"solid"):
        return False
    if len(data) >= _BINARY_HEADER + 4:
        (count,) = struct.unpack_from("<I", data, _BINARY_HEADER)
        if len(data) == _BINARY_HEADER + 4 + 50 * count:
            return False
    return True


_FLOAT = rb"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:nan|inf(?:inity)?))"
_VERTEX_RE = re.compile(rb"vertex\s+" + _FLOAT + rb"\s+" + _FLOAT + rb"\s+" + _FLOAT, re.IGNORECASE)
_FACET_RE = re.compile(rb"\bfacet\b", re.IGNORECASE)
_ENDFACET_RE = re.compile(rb"\bendfacet\b", re.IGNORECASE)


def _parse_ascii(data: bytes) -> np.ndarray:
    starts = [m.start() for m in _FACET_RE.finditer(data)]
    ends = [m.end() for m in _ENDFACET_RE.finditer(data)]
    tris = []
    for i, s in enumerate(starts):
        if i >= len(ends) or ends[i] < s:
            raise StlParseError("facet is not terminated by endfacet", s)
        e = ends[i]
        if i + 1 < len(starts) and starts[i + 1] < e:
            raise StlParseError("nested facet", starts[i + 1])
        verts = _VERTEX_RE.findall(data, s, e)
        if len(verts) != 3:
            raise StlParseError(f"facet has {len(verts)} vertices, expected 3", s)
        tris.append([[float(c) for c in vtx] for vtx in verts])
    if len(ends) > len(starts):
        raise StlParseError("endfacet without facet", ends[len(starts)])
    return np.array(tris, dtype=np.float64).reshape(-1, 3, 3)


def _parse_binary(data: bytes) -> np.ndarray:
    if len(data) < _BINARY_HEADER + 4:
        raise StlParseError("truncated binary STL header", len(data))
    (count,) = struct.unpack_from("<I", data, _BINARY_HEADER)
    need = _BINARY_HEADER + 4 + 50 * count
    if len(data) < need:
        complete = (len(data) - _BINARY_HEADER - 4) // 50
        raise StlParseError(
            f"truncated binary STL: header declares {count} facets, payload holds {complete}",
            _BINARY_HEADER + 4 + 50 * complete,
        )
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=_BINARY_HEADER + 4)
    return rec["v"].astype(np.float64)


def parse_stl(data: bytes) -> TriangleMesh:
    """Parse a binary or ASCII STL payload.

    Raises :class:`StlParseError` on truncation (with the byte offset) and
    :class:`MeshValidationError` on non-finite coordinates. A zero-facet file
    yields an empty mesh (``mesh.is_empty``).
    """
    data = bytes(data)
    tri = _parse_ascii(data) if _looks_ascii(data) else _parse_binary(data)
    return _from_soup(tri)


def load_stl(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        return parse_stl(fh.read())


def stl_bytes(mesh: TriangleMesh, binary: bool = True, name: str = "mesh") -> bytes:
    tri = mesh.triangles()
    if binary:
        rec = np.zeros(len(tri), dtype=_RECORD)
        rec["normal"] = mesh.normals
        rec["v"] = tri
        header = name.encode()[:_BINARY_HEADER].ljust(_BINARY_HEADER, b" ")
        return header + struct.pack("<I", len(tri)) + rec.tobytes()
    lines = [f"solid {name}"]
    for n, t in zip(mesh.normals.tolist(), tri.tolist()):
        lines.append(f"  facet normal {n[0]!r} {n[1]!r} {n[2]!r}")
        lines.append("    outer loop")
        for p in t:
            lines.append(f"      vertex {p[0]!r} {p[1]!r} {p[2]!r}")
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    return ("\n".join(lines) + "\n").encode()


def save_stl(mesh: TriangleMesh, path, binary: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(stl_bytes(mesh, binary=binary))
