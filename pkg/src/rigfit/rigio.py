"""Rig directory format.

A rig directory holds four files:

``rig.json``
    ``{"format": "rigfit-rig", "version": 1, "joints": [...], "vertex_mirror": [...] | null}``.
    Each joint has ``name``, ``parent`` (index or null), ``bind_local`` (16
    floats, row-major), ``dof_mask`` (9 ints, order Rx Ry Rz Tx Ty Tz Sx Sy
    Sz), ``limits`` (9 ``[lo, hi]`` pairs, null for an unbounded side) and
    ``symmetry_partner`` (index or null).
``mesh.obj``
    Base mesh, ascii OBJ with 17 significant digits.
``weights.json``
    ``{"n_vertices", "n_joints", "cells": [[v, k], ...], "classes": [...], "free": [...]}``;
    one class id per supported cell and one free value per class.
``expressions.json`` (optional)
    ``{"deltas": E x N x 3}``.

JSON floats are written with ``repr`` precision, so values round-trip exactly.
"""
import json
from pathlib import Path

import numpy as np

from .meshio import load_mesh, save_mesh
from .rig import ExpressionBasis, Joint, Rig, RigError, Skeleton, SkinningWeights

FORMAT = "rigfit-rig"
VERSION = 1


def _limit_out(x):
    return None if not np.isfinite(x) else float(x)


def _limit_in(x, default):
    return default if x is None else float(x)


def skeleton_to_dict(skeleton):
    joints = []
    for j in skeleton.joints:
        joints.append({
            "name": j.name,
            "parent": j.parent,
            "bind_local": [float(x) for x in j.bind_local.reshape(-1)],
            "dof_mask": [int(b) for b in j.dof_mask],
            "limits": [[_limit_out(lo), _limit_out(hi)] for lo, hi in j.limits],
            "symmetry_partner": j.symmetry_partner,
        })
    return joints


def skeleton_from_dict(joints):
    out = []
    for d in joints:
        try:
            limits = [[_limit_in(lo, -np.inf), _limit_in(hi, np.inf)] for lo, hi in d["limits"]]
            out.append(Joint(d["name"], d["parent"], d["bind_local"], d["dof_mask"], limits,
                             d.get("symmetry_partner")))
        except (KeyError, TypeError, ValueError) as exc:
            raise RigError(f"malformed joint entry {d!r}: {exc}") from exc
    return Skeleton(out)


def weights_to_dict(weights):
    return {
        "n_vertices": weights.N,
        "n_joints": weights.K,
        "cells": weights.cells.tolist(),
        "classes": weights.cell_class.tolist(),
        "free": [float(x) for x in weights.free_params],
    }


def weights_from_dict(d):
    try:
        return SkinningWeights(d["n_vertices"], d["n_joints"], d["cells"], d["classes"], d["free"])
    except KeyError as exc:
        raise RigError(f"weight file lacks {exc}") from exc


def save_weights(weights, path):
    Path(path).write_text(json.dumps(weights_to_dict(weights)))


def load_weights(path):
    return weights_from_dict(_read_json(path))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise RigError(f"{path}: {exc}") from exc


def save_rig(rig, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "joints": skeleton_to_dict(rig.skeleton),
        "vertex_mirror": None if rig.vertex_mirror is None else [int(i) for i in rig.vertex_mirror],
    }
    (d / "rig.json").write_text(json.dumps(meta, indent=1))
    save_mesh(rig.mesh, d / "mesh.obj")
    save_weights(rig.weights, d / "weights.json")
    expr = d / "expressions.json"
    if rig.expressions is not None:
        expr.write_text(json.dumps({"deltas": rig.expressions.deltas.tolist()}))
    elif expr.exists():
        expr.unlink()
    return d


def load_rig(directory, weights_path=None):
    """Load a rig directory; ``weights_path`` substitutes another weight file."""
    d = Path(directory)
    if not (d / "rig.json").is_file():
        raise FileNotFoundError(f"{d}: no rig.json")
    meta = _read_json(d / "rig.json")
    if meta.get("format") != FORMAT:
        raise RigError(f"{d}: not a rig directory (format {meta.get('format')!r})")
    if meta.get("version") != VERSION:
        raise RigError(f"{d}: unsupported rig version {meta.get('version')}")
    skeleton = skeleton_from_dict(meta["joints"])
    mesh = load_mesh(d / "mesh.obj")
    weights = load_weights(weights_path or d / "weights.json")
    expressions = None
    if (d / "expressions.json").is_file():
        expressions = ExpressionBasis(np.array(_read_json(d / "expressions.json")["deltas"], dtype=np.float64))
    mirror = meta.get("vertex_mirror")
    return Rig(mesh, skeleton, weights, expressions, None if mirror is None else np.asarray(mirror, dtype=np.int64))


def rig_schema(rig):
    """What two rigs must share for poses and expressions to transfer."""
    return {
        "joints": [j.name for j in rig.skeleton.joints],
        "pose_size": rig.layout.size,
        "expressions": rig.n_expressions,
    }
