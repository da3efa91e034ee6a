"""Triangle meshes, similarity transforms, OBJ I/O and primitive shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor

__all__ = [
    "Mesh",
    "MeshError",
    "ObjParseError",
    "SimilarityTransform",
    "quat_to_matrix",
    "quat_from_axis_angle",
    "apply_similarity",
    "centroid",
    "load_obj",
    "save_obj",
    "make_primitive",
    "unique_edges",
    "directed_neighbors",
    "uniform_laplacian",
]


class MeshError(ValueError):
    pass


class ObjParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh; ``vertices`` is (V, 3), ``faces`` is (F, 3)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(v).all():
            raise MeshError("mesh vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(f"face index out of range [0, {len(v)})")
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate face at row {int(np.argmax(degenerate))}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def translated(self, offset) -> "Mesh":
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.faces)


# ---------------------------------------------------------------------------
# quaternions and similarity transforms (w-first quaternions)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


@dataclass(frozen=True)
class SimilarityTransform:
    """Seven scalars: scale, (x, y) translation and a unit quaternion.

    Applied as ``p -> scale * R(q) @ p + (tx, ty, 0)``.  The quaternion is
    normalised and sign-canonicalised (``w >= 0``) at construction.
    """

    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        scale = float(self.scale)
        if not (scale > 0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        t = tuple(float(v) for v in self.translation)
        if len(t) != 2:
            raise ValueError("translation has exactly two components (x, y)")
        q = np.asarray(self.rotation, dtype=np.float64)
        n = np.linalg.norm(q)
        if q.shape != (4,) or not n > 0:
            raise ValueError("rotation must be a non-zero 4-vector (w, x, y, z)")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))

    @classmethod
    def from_vector(cls, c) -> "SimilarityTransform":
        c = list(c)
        if len(c) != 7:
            raise ValueError("expected 7 values: scale, tx, ty, qw, qx, qy, qz")
        return cls(c[0], (c[1], c[2]), tuple(c[3:]))

    def to_vector(self) -> list[float]:
        return [self.scale, *self.translation, *self.rotation]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation),
                "rotation": list(self.rotation)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], tuple(d["translation"]), tuple(d["rotation"]))

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def offset(self) -> np.ndarray:
        return np.array([self.translation[0], self.translation[1], 0.0])


def apply_similarity(points, c: SimilarityTransform):
    """Rotate, then scale, then translate in x/y.  Accepts arrays or Tensors."""
    m = c.scale * c.matrix()
    if isinstance(points, Tensor):
        return points @ m.T + c.offset()
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m.T + c.offset()


def centroid(mesh_or_points):
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, Mesh) else mesh_or_points
    if len(pts) == 0:
        raise MeshError("centroid of an empty mesh")
    if isinstance(pts, Tensor):
        return pts.mean(axis=0)
    return np.asarray(pts, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# connectivity


def unique_edges(faces) -> np.ndarray:
    """Sorted (E, 2) array of undirected edges, smaller index first."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def directed_neighbors(faces) -> np.ndarray:
    """Each undirected edge in both directions: (2E, 2) rows of (p, k)."""
    e = unique_edges(faces)
    return np.concatenate([e, e[:, ::-1]])


def uniform_laplacian(faces, n_vertices: int) -> sp.csr_matrix:
    """Sparse operator ``L`` with ``(L @ V)[p] = V[p] - mean(one-ring of p)``.

    Isolated vertices get a zero row.
    """
    d = directed_neighbors(faces)
    adj = sp.csr_matrix(
        (np.ones(len(d)), (d[:, 0], d[:, 1])), shape=(n_vertices, n_vertices)
    )
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    eye = sp.diags((deg > 0).astype(np.float64))
    return (eye - sp.diags(inv) @ adj).tocsr()


# ---------------------------------------------------------------------------
# OBJ


def load_obj(path) -> Mesh:
    """Read ``v``/``f`` records of a triangulated OBJ (1-based or negative indices)."""
    path = Path(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise ObjParseError(path, lineno, f"bad vertex: {exc}") from None
                if len(verts[-1]) != 3:
                    raise ObjParseError(path, lineno, "vertex needs 3 coordinates")
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise ObjParseError(path, lineno, f"face has {len(refs)} vertices, expected 3")
                idx = []
                for ref in refs:
                    try:
                        i = int(ref.split("/")[0])
                    except ValueError:
                        raise ObjParseError(path, lineno, f"bad face index {ref!r}") from None
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise ObjParseError(path, lineno, f"face index {ref} out of range")
                    idx.append(i)
                faces.append(idx)
    try:
        return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except MeshError as exc:
        raise ObjParseError(path, 0, str(exc)) from None


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# primitives


def _box(size, res) -> Mesh:
    sx, sy, sz = size
    nx, ny, nz = res
    # index lattice points on the surface of an (nx, ny, nz) grid
    lattice = {}
    verts = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in lattice:
            lattice[key] = len(verts)
            verts.append((sx * (i / nx - 0.5), sy * (j / ny - 0.5), sz * (k / nz - 0.5)))
        return lattice[key]

    faces = []

    def quad(a, b, c, d):
        faces.append((a, b, c))
        faces.append((a, c, d))

    # each face patch spans axes (u, v) with outward normal along w
    for axis, (nu, nv), outward in (
        (0, (ny, nz), 1), (0, (ny, nz), -1),
        (1, (nz, nx), 1), (1, (nz, nx), -1),
        (2, (nx, ny), 1), (2, (nx, ny), -1),
    ):
        n_axis = (nx, ny, nz)[axis]
        w = n_axis if outward > 0 else 0

        def point(u, v):
            if axis == 0:
                return vid(w, u, v)
            if axis == 1:
                return vid(v, w, u)
            return vid(u, v, w)

        for u in range(nu):
            for v in range(nv):
                a, b, c, d = point(u, v), point(u + 1, v), point(u + 1, v + 1), point(u, v + 1)
                if outward > 0:
                    quad(a, b, c, d)
                else:
                    quad(a, d, c, b)
    return Mesh(np.array(verts), np.array(faces))


def _sphere(radius: float, res: int) -> Mesh:
    n_lat, n_lon = res, 2 * res
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        phi = math.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * math.pi * j / n_lon
            verts.append((radius * math.sin(phi) * math.cos(lam),
                          radius * math.sin(phi) * math.sin(lam),
                          radius * math.cos(phi)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j + 1), ring(i + 1, j)
            faces.append((a, d, c))
            faces.append((a, c, b))
    for j in range(n_lon):
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return Mesh(np.array(verts), np.array(faces))


def _cylinder(radius: float, height: float, res: int) -> Mesh:
    """Cylinder along z, with axial subdivisions matching the ring spacing."""
    n_ring = res
    n_h = max(1, int(round(height / (2 * math.pi * radius / n_ring))))
    verts = []
    for k in range(n_h + 1):
        z = height * (k / n_h - 0.5)
        for j in range(n_ring):
            lam = 2 * math.pi * j / n_ring
            verts.append((radius * math.cos(lam), radius * math.sin(lam), z))
    top = len(verts)
    verts.append((0.0, 0.0, 0.5 * height))
    bottom = len(verts)
    verts.append((0.0, 0.0, -0.5 * height))

    def rv(k, j):
        return k * n_ring + (j % n_ring)

    faces = []
    for k in range(n_h):
        for j in range(n_ring):
            a, b = rv(k, j), rv(k, j + 1)
            c, d = rv(k + 1, j + 1), rv(k + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for j in range(n_ring):
        faces.append((top, rv(n_h, j), rv(n_h, j + 1)))
        faces.append((bottom, rv(0, j + 1), rv(0, j)))
    return Mesh(np.array(verts), np.array(faces))


def make_primitive(kind: str, resolution=1, size=1.0) -> Mesh:
    """Watertight, outward-oriented primitive centred at the origin.

    ``box``: ``size`` is (sx, sy, sz) or a scalar edge; ``resolution`` is the
    number of cells per axis (int or 3-tuple).  ``sphere``: ``size`` is the
    radius, ``resolution`` the latitude band count (>= 2).  ``cylinder``:
    ``size`` is (radius, height) along z, ``resolution`` the ring vertex count
    (>= 3).
    """
    size_arr = np.atleast_1d(np.asarray(size, dtype=np.float64))
    if (size_arr <= 0).any() or not np.isfinite(size_arr).all():
        raise ValueError(f"primitive size must be positive, got {size}")
    if kind == "box":
        dims = tuple(np.broadcast_to(size_arr, (3,)).tolist())
        res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution), (3,)))
        if min(res) < 1:
            raise ValueError("box resolution must be >= 1")
        return _box(dims, res)
    if kind == "sphere":
        if int(resolution) < 2:
            raise ValueError("sphere resolution must be >= 2")
        return _sphere(float(size_arr[0]), int(resolution))
    if kind == "cylinder":
        if int(resolution) < 3:
            raise ValueError("cylinder resolution must be >= 3")
        if size_arr.size != 2:
            raise ValueError("cylinder size is (radius, height)")
        return _cylinder(float(size_arr[0]), float(size_arr[1]), int(resolution))
    raise ValueError(f"unknown primitive kind {kind!r}")
