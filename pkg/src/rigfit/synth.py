"""Procedural toy rigs, synthetic scans and skinning-weight corpus synthesis."""
import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .fitting import FitConfig, FitError, MeshTarget, Model, fit_stage1_linear
from .geometry import Mesh, PointCloud, sample_surface, vertex_normals
from .losses import loss_vertex
from .optim import Adam
from .rig import ExpressionBasis, Joint, Rig, RigError, Skeleton, SkinningWeights, symmetry_classes

# ---------------------------------------------------------------------------
# toy rig
# ---------------------------------------------------------------------------


def icosphere(level):
    """Unit icosphere; mirror-symmetric about ``x = 0`` at every level."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (v[a] + v[b]) / 2.0
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(v), np.array(faces, dtype=np.int64)


def head_shape(unit):
    """Ellipsoid with a nose bump and a flattened back, symmetric in ``x``."""
    x, y, z = unit[:, 0] * 0.75, unit[:, 1] * 1.0, unit[:, 2] * 0.85
    nose = 0.18 * np.exp(-(x**2 + (y + 0.05) ** 2) / 0.03) * (z > 0)
    chin = 0.06 * np.exp(-(x**2 + (y + 0.75) ** 2) / 0.05) * (z > 0)
    back = -0.05 * np.clip(-unit[:, 2], 0, None) ** 2
    return np.stack([x, y, z + nose + chin + back], axis=1)


def mirror_map(points, tol=1e-9):
    """Index of each point's reflection across ``x = 0``."""
    tree = cKDTree(points)
    d, idx = tree.query(points * np.array([-1.0, 1.0, 1.0]))
    if np.any(d > tol):
        raise RigError("point set is not mirror symmetric")
    return idx


# (name, parent name, anchor direction on the unit sphere, side)
_ANCHORS = [
    ("nose", "root", (0.0, -0.05, 1.0), "mid"),
    ("cheek", "root", (0.62, -0.2, 0.78), "pair"),
    ("chin", "root", (0.0, -0.75, 0.66), "mid"),
    ("forehead", "root", (0.0, 0.55, 0.83), "mid"),
    ("brow", "forehead", (0.38, 0.35, 0.85), "pair"),
    ("jaw", "root", (0.6, -0.55, 0.5), "pair"),
    ("mouth", "chin", (0.0, -0.42, 0.9), "mid"),
    ("eye", "brow", (0.33, 0.18, 0.92), "pair"),
    ("mouth_corner", "mouth", (0.28, -0.4, 0.87), "pair"),
    ("ear", "root", (1.0, 0.0, 0.0), "pair"),
    ("crown", "root", (0.0, 1.0, 0.0), "mid"),
    ("temple", "root", (0.75, 0.45, 0.45), "pair"),
    ("back", "root", (0.0, 0.0, -1.0), "mid"),
    ("nape", "back", (0.45, -0.5, -0.75), "pair"),
]


@dataclass
class ToyRigConfig:
    subdivision: int = 2
    joints: int = 12
    symmetric: bool = True
    rotate_joints: bool = True
    root_scale: bool = True
    rot_limit: float = 0.5
    trans_limit: float = 0.25
    scale_limits: tuple = (0.6, 1.5)
    falloff_radius: float = 0.2
    support_threshold: float = 1e-3
    expressions: int = 4
    seed: int = 0
    joint_jitter: float = 0.02

    def to_dict(self):
        return asdict(self)


def _joint_specs(config, rng):
    specs = [("root", None, None, "root")]
    for name, parent, direction, side in _ANCHORS:
        for s in (("mid",) if side == "mid" else ("L", "R")):
            specs.append((name if s == "mid" else f"{name}_{s}", parent, direction, s))
    extra = 0
    while len(specs) < config.joints:
        # beyond the named anchors: random mirrored pairs on the front of the head
        d = rng.normal(size=3)
        d[0] = abs(d[0]) + 0.2
        d[2] = abs(d[2])
        d /= np.linalg.norm(d)
        for s in ("L", "R"):
            specs.append((f"extra{extra}_{s}", "root", tuple(d), s))
        extra += 1
    specs = specs[: config.joints]
    # never leave half of a mirrored pair
    if specs[-1][3] == "L":
        specs[-1] = (specs[-1][0][:-2], specs[-1][1], specs[-1][2], "mid")
    return specs


def make_toy_rig(config=None):
    """Deterministic toy head rig: mesh, skeleton, falloff weights, expression basis."""
    config = config or ToyRigConfig()
    if config.joints < 1:
        raise RigError("toy rig needs at least one joint")
    rng = np.random.default_rng(config.seed)
    unit, faces = icosphere(config.subdivision)
    verts = head_shape(unit)
    if config.joints > len(verts):
        raise RigError(f"{config.joints} joints exceed {len(verts)} vertices")
    mesh = Mesh(verts, faces)
    vmirror = mirror_map(verts)

    specs = _joint_specs(config, rng)
    names = [s[0] for s in specs]
    positions = np.zeros((len(specs), 3))
    surface = cKDTree(unit)
    for k, (name, _, direction, side) in enumerate(specs):
        if side == "root":
            continue
        d = np.array(direction, dtype=np.float64)
        if side == "R":
            positions[k] = positions[names.index(name[:-1] + "L")] * np.array([-1, 1, 1])
            continue
        d = d / np.linalg.norm(d) + config.joint_jitter * rng.normal(size=3) * (np.array([0, 1, 1]) if side == "mid" else 1)
        if side == "mid":
            d[0] = 0.0
        d /= np.linalg.norm(d)
        # sit slightly beneath the surface point in that direction
        positions[k] = 0.85 * verts[surface.query(d)[1]]
        if side == "mid":
            positions[k, 0] = 0.0

    joints = []
    for k, (name, parent, _, side) in enumerate(specs):
        if side == "root":
            pidx = None
        else:
            base = parent
            if side in ("L", "R") and f"{parent}_{side}" in names:
                base = f"{parent}_{side}"
            pidx = names.index(base) if base in names[:k] else 0
        bind = np.eye(4)
        bind[:3, 3] = positions[k] - (positions[pidx] if pidx is not None else 0.0)
        mask = np.zeros(9, dtype=bool)
        limits = np.tile([0.0, 0.0], (9, 1))
        limits[6:] = 1.0
        if side == "root":
            mask[0:6] = True
            mask[6:9] = config.root_scale
            limits[0:3] = (-np.pi / 2, np.pi / 2)
            limits[3:6] = (-1.0, 1.0)
            limits[6:9] = (0.5, 2.0)
        else:
            mask[3:9] = True
            mask[0:3] = config.rotate_joints
            limits[0:3] = (-config.rot_limit, config.rot_limit)
            limits[3:6] = (-config.trans_limit, config.trans_limit)
            limits[6:9] = config.scale_limits
        partner = None
        if config.symmetric and side in ("L", "R"):
            other = name[:-1] + ("R" if side == "L" else "L")
            partner = names.index(other) if other in names else None
        joints.append(Joint(name, pidx, bind, mask, limits, partner))
    if not config.symmetric:
        for j in joints:
            j.symmetry_partner = None
    skeleton = Skeleton(joints)
    jmirror = np.array([skeleton.partner(k) for k in range(skeleton.K)])
    if not config.symmetric:
        vmirror_w = np.arange(len(verts))
    else:
        vmirror_w = vmirror

    dense = falloff_weights(verts, skeleton.joint_positions(), config.falloff_radius)
    support = dense >= config.support_threshold
    dense = np.where(support, dense, 0.0)
    dense /= dense.sum(axis=1, keepdims=True)
    cells, cls = symmetry_classes(support, vmirror_w, jmirror)
    weights = SkinningWeights(len(verts), skeleton.K, cells, cls, np.zeros(int(cls.max()) + 1))
    weights = weights.with_params(weights.class_values_from_dense(dense))

    basis = toy_expressions(verts, skeleton, config.expressions) if config.expressions else None
    return Rig(mesh, skeleton, weights, basis, vmirror)


def falloff_weights(verts, joint_pos, radius):
    """Gaussian distance falloff per joint; the root gets a broad floor."""
    d2 = ((verts[:, None, :] - joint_pos[None, :, :]) ** 2).sum(-1)
    w = np.exp(-d2 / (2.0 * radius**2))
    w[:, 0] = 0.05 + 0.2 * np.exp(-d2[:, 0] / 2.0)
    return w / w.sum(axis=1, keepdims=True)


def toy_expressions(verts, skeleton, count):
    """Localised symmetric offset fields standing in for expression blendshapes."""
    centers = [(0.0, -0.42, 0.8), (0.0, -0.7, 0.6), (0.3, 0.35, 0.8), (0.55, -0.2, 0.65),
               (0.25, -0.4, 0.8), (0.0, 0.5, 0.8)]
    dirs = [(0.0, -1.0, 0.2), (0.0, -1.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.6),
            (1.0, 0.5, 0.0), (0.0, 1.0, -0.2)]
    out = []
    for e in range(count):
        c = np.array(centers[e % len(centers)])
        d = np.array(dirs[e % len(dirs)], dtype=np.float64)
        d /= np.linalg.norm(d)
        field_ = np.zeros_like(verts)
        for sgn in ((1.0,) if c[0] == 0 else (1.0, -1.0)):
            cc = c * np.array([sgn, 1, 1])
            dd = d * np.array([sgn, 1, 1])
            g = np.exp(-((verts - cc) ** 2).sum(1) / 0.02)
            field_ += 0.08 * g[:, None] * dd
        out.append(field_)
    return ExpressionBasis(np.stack(out))


# ---------------------------------------------------------------------------
# synthetic identities and scans
# ---------------------------------------------------------------------------


def random_pose(rig, rng, scale=0.5, root_scale=0.3):
    """Packed pose drawn inside the joint limits (fraction ``scale`` of each box)."""
    layout = rig.layout
    lo, hi = layout.limits(rig.skeleton)
    ident = layout.identity()
    out = ident.copy()
    for s, (k, d) in enumerate(layout.owners):
        f = root_scale if k == 0 else scale
        lo_s, hi_s = max(lo[s], -1e3), min(hi[s], 1e3)
        center = ident[s]
        half = min(center - lo_s, hi_s - center)
        out[s] = center + f * half * rng.uniform(-1.0, 1.0)
    return out


@dataclass
class IdentitySet:
    """Ground-truth synthetic subjects: per-identity pose and skinning parameters."""

    poses: np.ndarray
    free: np.ndarray
    vertices: np.ndarray


def weight_modes(rig, count, rng, smoothness=0.25):
    """Smooth random fields over the weight classes (symmetric by construction)."""
    w = rig.weights
    pos = rig.mesh.vertices[w.cells[:, 0]]
    centers = rng.normal(size=(count, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= 0.9
    modes = []
    for c in centers:
        c_mirror = c * np.array([-1, 1, 1])
        g = np.exp(-((pos - c) ** 2).sum(1) / smoothness) + np.exp(-((pos - c_mirror) ** 2).sum(1) / smoothness)
        signs = np.where(w.cells[:, 1] % 2 == 0, 1.0, -1.0)
        field_ = g * signs
        modes.append(np.bincount(w.cell_class, weights=field_, minlength=w.n_classes)
                     / np.bincount(w.cell_class, minlength=w.n_classes))
    return np.array(modes)


def make_identities(rig, count, rng, base_free=None, modes=None, mode_scale=0.6, pose_scale=0.5,
                    root_scale=0.0):
    """Subjects whose meshes come from the rig with per-subject weights.

    ``free_i = base_free * (1 + mode_scale * sum_j a_ij * modes_j)`` with
    ``a_ij ~ U(-1, 1)``; poses are random inside the limits.
    """
    base = rig.weights.free_params if base_free is None else base_free
    modes = np.zeros((0, len(base))) if modes is None else modes
    poses, frees, verts = [], [], []
    for _ in range(count):
        a = rng.uniform(-1.0, 1.0, size=len(modes))
        free = base * np.clip(1.0 + mode_scale * (a @ modes), 0.05, None)
        pose = random_pose(rig, rng, pose_scale, root_scale)
        poses.append(pose)
        frees.append(free)
        verts.append(rig.deform(pose, free))
    return IdentitySet(np.array(poses), np.array(frees), np.array(verts))


def synth_scan(rig, pose, noise_sigma=0.0, dropout_fraction=0.0, n_points=2000, rng=None, free=None,
               coeffs=None):
    """Surface samples of the posed mesh with Gaussian noise and one contiguous hole."""
    if not 0.0 <= dropout_fraction < 1.0:
        raise ValueError("dropout fraction must be in [0, 1)")
    rng = rng or np.random.default_rng(0)
    verts = np.asarray(rig.deform(pose, free, coeffs if rig.n_expressions else None))
    pts, face, bary = sample_surface(rig.mesh, n_points, rng, verts)
    vn = vertex_normals(rig.mesh, verts)
    normals = np.einsum("mi,mij->mj", bary, vn[rig.mesh.faces[face]])
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    if dropout_fraction > 0:
        center = pts[rng.integers(len(pts))]
        order = np.argsort(((pts - center) ** 2).sum(1), kind="stable")
        drop = int(round(dropout_fraction * len(pts)))
        keep = np.sort(order[drop:])
        pts, normals = pts[keep], normals[keep]
    return PointCloud(pts, normals)


# ---------------------------------------------------------------------------
# corpus synthesis
# ---------------------------------------------------------------------------


@dataclass
class CorpusSpec:
    snapshots_per_fit: int = 4
    cycles: int = 2
    perturb_copies: int = 3
    perturb_fraction: float = 0.05
    perturb_sparsity: float = 0.2
    split: tuple = (0.906, 0.021, 0.073)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")

    def expected_poses(self, n_scans):
        return self.snapshots_per_fit * self.cycles * n_scans * (1 + self.perturb_copies)

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def perturb_pose(pose, spec, rng):
    """Scale ``round(sparsity * P)`` randomly chosen nonzero slots by ``1 +- fraction``."""
    pose = np.array(pose, dtype=np.float64)
    candidates = np.flatnonzero(pose != 0.0)
    count = min(len(candidates), int(round(spec.perturb_sparsity * len(pose))))
    chosen = rng.choice(candidates, size=count, replace=False)
    signs = rng.choice([-1.0, 1.0], size=count)
    pose[chosen] *= 1.0 + signs * spec.perturb_fraction
    return pose, np.sort(chosen)


@dataclass
class TransformCorpus:
    poses: np.ndarray
    scan_index: np.ndarray
    source: np.ndarray  # 0 = snapshot, k > 0 = k-th perturbed copy
    learned_free: np.ndarray


def harvest_transform_corpus(rig, scans, spec, config):
    """Stage-1 alternation with pose snapshots, then sparse perturbation copies."""
    if not scans:
        raise FitError("no scans to harvest from")
    cfg = FitConfig(**{**config.__dict__, "stage1_cycles": spec.cycles})
    result = fit_stage1_linear(rig, scans, cfg, snapshots_per_fit=spec.snapshots_per_fit)
    rng = np.random.default_rng(spec.seed)
    poses, scan_idx, source = [], [], []
    for _, i, pose in result.snapshots:
        poses.append(pose)
        scan_idx.append(i)
        source.append(0)
    base = list(zip(poses, scan_idx))
    for copy in range(1, spec.perturb_copies + 1):
        for pose, i in base:
            poses.append(perturb_pose(pose, spec, rng)[0])
            scan_idx.append(i)
            source.append(copy)
    return TransformCorpus(np.array(poses), np.array(scan_idx), np.array(source), result.free_params)


@dataclass
class SkinningSample:
    params: np.ndarray
    loss: float
    steps: int


def fit_weights_for_pose(rig, pose, target, init_free, config, lr=None):
    """Optimise skinning parameters with the pose frozen until convergence.

    Converged when the relative objective change over 50 steps drops below
    ``config.weight_fit_tol`` or after ``weight_fit_max_iters`` steps.
    """
    tgt = target if isinstance(target, MeshTarget) else MeshTarget(target)
    model = Model(rig)
    free = np.array(init_free, dtype=np.float64)
    opt = Adam({"free": free})
    lr = config.weight_fit_lr if lr is None else lr
    best_val, best = np.inf, free.copy()
    marks = []
    steps = 0
    for step in range(config.weight_fit_max_iters):
        tape = ad.Tape()
        fv = tape.var(free)
        out = model.objective(tgt, {"pose": pose, "free": fv}, config.loss, config.loss.lambda_m)
        val = float(out.value)
        if not np.isfinite(val):
            raise FitError(f"weight fit diverged at step {step}")
        if val < best_val:
            best_val, best = val, free.copy()
        if step % 50 == 0:
            marks.append(best_val)
            if len(marks) > 1 and abs(marks[-2] - marks[-1]) <= config.weight_fit_tol * max(abs(marks[-2]), 1e-300):
                break
        (g,) = tape.gradient(out, [fv])
        scale = config.lr_final_scale ** (step / max(1, config.weight_fit_max_iters - 1))
        opt.step({"free": free}, {"free": g}, lr=lr * scale)
        steps = step + 1
    verts = rig.deform(pose, best)
    return SkinningSample(best, float(loss_vertex(verts, tgt.vertices)), steps)


def _weight_job(args):
    rig, pose, scan, init, config = args
    return fit_weights_for_pose(rig, pose, scan, init, config)


def synthesize_samples(rig, corpus, scans, config, init_free=None, progress=None, workers=1):
    """One converged weight fit per harvested pose, ordered by pose index.

    With ``workers > 1`` the fits run in a process pool; the output order
    and values do not depend on the worker count.
    """
    init = corpus.learned_free if init_free is None else init_free
    jobs = [(rig, pose, np.asarray(getattr(scans[i], "vertices", scans[i])), init, config)
            for pose, i in zip(corpus.poses, corpus.scan_index)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_weight_job, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
            out = []
            for j, sample in enumerate(results):
                out.append(sample)
                if progress is not None:
                    progress(j, sample)
            return out
    out = []
    for j, job in enumerate(jobs):
        out.append(_weight_job(job))
        if progress is not None:
            progress(j, out[-1])
    return out


def split_sizes(n, ratios):
    """Floor each share, then hand the remainder to the largest fractional parts."""
    raw = np.asarray(ratios, dtype=np.float64) * n
    sizes = np.floor(raw + 1e-9).astype(int)
    rem = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    for j in order[:rem]:
        sizes[j] += 1
    return sizes


def split_corpus(n, ratios, seed):
    """Disjoint, exhaustive, seed-deterministic index split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    sizes = split_sizes(n, ratios)
    for r, s in zip(ratios, sizes):
        if r > 0 and s == 0:
            raise ValueError(f"split ratio {r} yields an empty split for {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)[:-1]
    return [np.sort(p) for p in np.split(perm, bounds)]


# ---------------------------------------------------------------------------
# corpus directory
# ---------------------------------------------------------------------------

_BIN_MAGIC = b"RGFTARR\0"


def write_array(path, arr):
    """Little-endian float32 matrix with an 16-byte header (magic, rows, cols)."""
    arr = np.asarray(arr, dtype=np.float64)
    arr = arr.reshape(len(arr), -1)
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_array(path):
    data = Path(path).read_bytes()
    if data[:8] != _BIN_MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a corpus array file")
    rows, cols = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(rows, cols)


def save_corpus(directory, corpus, samples, spec, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_array(d / "poses.bin", corpus.poses)
    write_array(d / "samples.bin", np.array([s.params for s in samples]))
    write_array(d / "linear.bin", corpus.learned_free[None, :])
    splits = split_corpus(len(samples), spec.split, spec.seed)
    manifest = {
        "spec": spec.to_dict(),
        "n_poses": int(len(corpus.poses)),
        "n_samples": len(samples),
        "scan_index": corpus.scan_index.tolist(),
        "source": corpus.source.tolist(),
        "sample_loss": [s.loss for s in samples],
        "splits": {name: idx.tolist() for name, idx in zip(("train", "val", "test"), splits)},
        **(extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_corpus(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    samples = read_array(d / "samples.bin")
    poses = read_array(d / "poses.bin")
    linear = read_array(d / "linear.bin")[0]
    if len(samples) != manifest["n_samples"] or len(poses) != manifest["n_poses"]:
        raise ValueError(f"{d}: manifest does not match array files")
    return manifest, poses, samples, linear


def manifest_hash(directory):
    return hashlib.sha256((Path(directory) / "manifest.json").read_bytes()).hexdigest()
