"""Mesh and point-cloud containers, differential operators and error metrics."""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import kernels


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with fixed topology.

    ``adjacency`` is derived from ``faces`` at construction and is symmetric.
    """

    vertices: np.ndarray
    faces: np.ndarray
    adjacency: tuple = field(init=False, repr=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise GeometryError(f"vertices must be N x 3, got {verts.shape}")
        n = len(verts)
        if len(faces) and (faces.min() < 0 or faces.max() >= n):
            raise GeometryError("face index out of range")
        degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if degenerate.any():
            raise GeometryError(f"degenerate face at row {int(np.argmax(degenerate))}")
        verts.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "adjacency", _adjacency(n, faces))

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices):
        """Same topology, new positions."""
        return Mesh(vertices, self.faces)

    def bbox_diagonal(self):
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def _adjacency(n, faces):
    nbrs = [set() for _ in range(n)]
    for a, b, c in faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise GeometryError("normals must match points")
            length = np.linalg.norm(nrm, axis=1, keepdims=True)
            if np.any(length == 0):
                raise GeometryError("zero-length normal")
            nrm = nrm / length
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)


class SpatialIndex:
    """k-d tree nearest-neighbour lookup with lowest-index tie breaking."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)
        self._tree = cKDTree(self.points)

    def nearest(self, queries):
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(2, len(self.points))
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            return dist, idx
        d0, i0 = dist[:, 0], idx[:, 0]
        tie = dist[:, 1] <= d0 * (1.0 + 1e-12)
        if tie.any():
            # Rare ties (possibly more than two-way): a full scan lets the lowest index win.
            for q in np.flatnonzero(tie):
                dd = np.linalg.norm(self.points - queries[q], axis=1)
                i0[q] = int(np.flatnonzero(dd == dd.min())[0])
                d0[q] = dd[i0[q]]
        return d0, i0


@dataclass(frozen=True)
class ErrorReport:
    mean: float
    rms: float
    max: float
    std: float
    count: int

    @classmethod
    def from_distances(cls, d):
        d = np.asarray(d, dtype=np.float64)
        if d.size == 0:
            raise GeometryError("no distances to summarise")
        return cls(float(d.mean()), float(np.sqrt(np.mean(d * d))), float(d.max()), float(d.std()), int(d.size))

    def as_dict(self):
        return {"mean": self.mean, "rms": self.rms, "max": self.max, "std": self.std, "count": self.count}


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def laplacian_matrix(mesh):
    """Sparse uniform (umbrella) operator ``I - D^-1 A``; isolated rows are zero."""
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for i, nb in enumerate(mesh.adjacency):
        if len(nb) == 0:
            continue
        rows.append(i)
        cols.append(i)
        vals.append(1.0)
        rows.extend([i] * len(nb))
        cols.extend(nb.tolist())
        vals.extend([-1.0 / len(nb)] * len(nb))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def laplacian(mesh, vertices=None):
    """Differential coordinates ``v_i - mean(neighbours of i)``."""
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    if v.shape != (mesh.n_vertices, 3):
        raise GeometryError(f"expected {(mesh.n_vertices, 3)} vertices, got {v.shape}")
    return laplacian_matrix(mesh) @ v


# ---------------------------------------------------------------------------
# sampling and metrics
# ---------------------------------------------------------------------------

def face_areas(vertices, faces):
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def vertex_normals(mesh, vertices=None):
    v = mesh.vertices if vertices is None else vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    vn = np.zeros_like(v)
    for j in range(3):
        np.add.at(vn, f[:, j], fn)
    length = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(length == 0, 1.0, length)


def sample_surface(mesh, count, rng, vertices=None):
    """Area-weighted uniform samples: returns ``(points, face_index, barycentric)``."""
    v = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    area = face_areas(v, mesh.faces)
    face = rng.choice(len(area), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = v[mesh.faces[face]]
    return np.einsum("mi,mij->mj", bary, tri), face, bary


def point_to_point_error(mesh_a, mesh_b):
    va = np.asarray(getattr(mesh_a, "vertices", mesh_a), dtype=np.float64)
    vb = np.asarray(getattr(mesh_b, "vertices", mesh_b), dtype=np.float64)
    if va.shape != vb.shape:
        raise GeometryError(f"vertex count mismatch: {va.shape} vs {vb.shape}")
    return ErrorReport.from_distances(np.linalg.norm(va - vb, axis=1))


def closest_points(cloud, mesh, vertices=None):
    """Closest surface point on ``mesh`` for every cloud point."""
    pts = getattr(cloud, "points", cloud)
    v = mesh.vertices if vertices is None else vertices
    if len(pts) == 0 or len(mesh.faces) == 0:
        raise GeometryError("empty cloud or mesh")
    return kernels.closest_points_on_mesh(pts, v, mesh.faces)


def scan_to_mesh_distance(cloud, mesh):
    dist, _, _ = closest_points(cloud, mesh)
    return ErrorReport.from_distances(dist)


def chamfer_distance(cloud_a, cloud_b, squared=True, halve=True):
    """Symmetric chamfer distance.

    Default convention: ``(mean_a d(a,B)^2 + mean_b d(b,A)^2) / 2``.
    ``squared`` and ``halve`` switch to unsquared distances / plain sum.
    """
    a = np.asarray(getattr(cloud_a, "points", cloud_a), dtype=np.float64)
    b = np.asarray(getattr(cloud_b, "points", cloud_b), dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("chamfer distance of an empty cloud")
    da, _ = SpatialIndex(b).nearest(a)
    db, _ = SpatialIndex(a).nearest(b)
    if squared:
        da, db = da * da, db * db
    total = da.mean() + db.mean()
    return float(total / 2 if halve else total)
