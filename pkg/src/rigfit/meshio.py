"""ascii OBJ / PLY / XYZ readers and writers.

Floats are written with 17 significant digits so a save/load round trip is
bit-exact.
"""
from pathlib import Path

import numpy as np

from .geometry import GeometryError, Mesh, PointCloud

FLOAT_FMT = "%.17g"


def load_mesh(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    verts, faces = [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise GeometryError(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                if i == 0:
                    raise GeometryError(f"{path}:{lineno}: OBJ indices are 1-based, got 0")
                idx.append(i - 1 if i > 0 else len(verts) + i)
            if len(idx) < 3:
                raise GeometryError(f"{path}:{lineno}: face needs at least 3 vertices")
            # fan triangulation
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise GeometryError(f"{path}: face index out of range")
    return Mesh(v, f)


def save_mesh(mesh, path):
    v = mesh.vertices
    if len(v) == 0:
        raise GeometryError("refusing to write an empty mesh")
    if not np.all(np.isfinite(v)):
        raise GeometryError("mesh has non-finite vertices")
    lines = ["v " + " ".join(FLOAT_FMT % x for x in row) for row in v]
    lines += ["f %d %d %d" % tuple(f + 1) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_rows(lines, origin):
    rows = []
    width = None
    for lineno, raw in lines:
        parts = raw.split()
        if not parts:
            continue
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise GeometryError(f"{origin}:{lineno}: malformed line {raw!r}") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise GeometryError(f"{origin}:{lineno}: expected {width} columns, got {len(vals)}")
        rows.append(vals)
    return np.array(rows, dtype=np.float64), width


def load_point_cloud(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    text = path.read_text().splitlines()
    if text and text[0].strip() == "ply":
        return _load_ply(text, path)
    data, width = _parse_rows(enumerate(text, 1), path)
    if width not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, got {width}")
    return PointCloud(data[:, :3], data[:, 3:6] if width == 6 else None)


def _load_ply(text, path):
    count, props, i = None, [], 1
    in_vertex = False
    while i < len(text):
        parts = text[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise GeometryError(f"{path}: only ascii PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if count is None or not {"x", "y", "z"} <= set(props):
        raise GeometryError(f"{path}: PLY without x/y/z vertex element")
    body = [(i + j + 1, text[i + j]) for j in range(count) if i + j < len(text)]
    if len(body) < count:
        raise GeometryError(f"{path}: expected {count} vertices, found {len(body)}")
    data, width = _parse_rows(body, path)
    if width != len(props):
        raise GeometryError(f"{path}: {width} columns but {len(props)} properties")
    col = {p: j for j, p in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if {"nx", "ny", "nz"} <= set(props):
        normals = data[:, [col["nx"], col["ny"], col["nz"]]]
    return PointCloud(pts, normals)


def save_point_cloud(cloud, path):
    """Write XYZ (or XYZ+normals); ``.ply`` suffix selects ascii PLY."""
    path = Path(path)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    rows = [" ".join(FLOAT_FMT % x for x in r) for r in data]
    if path.suffix.lower() == ".ply":
        header = ["ply", "format ascii 1.0", f"element vertex {len(data)}",
                  "property double x", "property double y", "property double z"]
        if cloud.normals is not None:
            header += ["property double nx", "property double ny", "property double nz"]
        header.append("end_header")
        rows = header + rows
    path.write_text("\n".join(rows) + "\n")
