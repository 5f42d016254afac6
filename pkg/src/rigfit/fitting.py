"""Correspondences, the staged fitting schedules, landmark fitting, retargeting
and evaluation.

Every optimiser run is split into windows of ``refresh_interval`` steps.
Correspondences and the magnitude-regulariser weight are updated only at
window boundaries, and each window ends on its best iterate, so the
objective measured at boundaries never increases.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .geometry import (ErrorReport, GeometryError, Mesh, PointCloud, closest_points, point_to_point_error,
                       scan_to_mesh_distance, vertex_normals)
from .losses import (LossWeights, loss_box, loss_box_rts, loss_landmarks_2d, loss_laplacian, loss_magnitude,
                     loss_points, loss_vertex, landmark_points)
from .neural import decoder_forward
from .optim import Adam


class FitError(RuntimeError):
    pass


@dataclass
class FitConfig:
    # test-time schedule
    pose_iters: int = 500
    z_iters: int = 500
    expr_iters: int = 500
    identity_cycles: int = 2
    outer_cycles: int = 2
    pose_lr: float = 1e-3
    z_lr: float = 1e-2
    # Z phases also update the pose (after the first pose-only phase)
    joint_z_phase: bool = True
    expr_lr: float = 1e-2
    # stage 1 (global linear weights)
    stage1_pose_iters: int = 3000
    stage1_weight_iters: int = 3000
    stage1_cycles: int = 5
    weight_lr: float = 1e-4
    # per-pose weight fits for corpus synthesis
    weight_fit_lr: float = 1e-3
    weight_fit_max_iters: int = 2000
    weight_fit_tol: float = 1e-6
    # regularisation and correspondences
    loss: LossWeights = field(default_factory=LossWeights)
    lambda_m_floor: float = 0.003
    refresh_interval: int = 50
    icp_max_distance: float = 0.1
    icp_max_normal_angle: float = 60.0
    icp_tangent_weight: float = 0.1
    # root-only (global alignment) steps before the first pose phase
    root_warmup_iters: int = 200
    root_warmup_lr: float = 1e-2
    lr_final_scale: float = 1.0
    seed: int = 0

    @classmethod
    def from_mapping(cls, cfg):
        """Build from a flat mapping; ``lambda_m/x/p`` and ``rmse_inside`` go to the loss weights."""
        cfg = dict(cfg or {})
        loss_cfg = dict(cfg.pop("loss", None) or {})
        for key in ("lambda_m", "lambda_x", "lambda_p", "rmse_inside"):
            if key in cfg:
                loss_cfg[key] = cfg.pop(key)
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(loss=LossWeights.from_mapping(loss_cfg), **cfg)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# correspondences
# ---------------------------------------------------------------------------


@dataclass
class Correspondence:
    """Cloud point ``i`` paired with the surface point ``bary`` on ``face``."""

    point_index: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    distance: np.ndarray
    weight: np.ndarray

    @property
    def kept(self):
        return self.weight > 0

    def matrix(self, faces, n_vertices):
        """Sparse ``M_kept x N`` interpolation matrix for retained pairs."""
        k = np.flatnonzero(self.kept)
        rows = np.repeat(np.arange(len(k)), 3)
        cols = faces[self.face[k]].reshape(-1)
        return sp.csr_matrix((self.bary[k].reshape(-1), (rows, cols)), shape=(len(k), n_vertices))


def build_correspondence(mesh, cloud, max_distance=None, max_normal_angle=None, vertices=None):
    """Closest surface point per cloud point, with distance / normal rejection."""
    v = mesh.vertices if vertices is None else np.asarray(vertices)
    pts = cloud.points
    dist, face, bary = closest_points(cloud, mesh, v)
    keep = np.ones(len(pts), dtype=bool)
    if max_distance is not None:
        keep &= dist <= max_distance
    if max_normal_angle is not None and cloud.normals is not None:
        vn = vertex_normals(mesh, v)
        n = np.einsum("mi,mij->mj", bary, vn[mesh.faces[face]])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        cosang = np.einsum("ij,ij->i", n, cloud.normals)
        keep &= cosang >= np.cos(np.deg2rad(max_normal_angle))
    if not keep.any():
        raise FitError("all correspondences rejected")
    return Correspondence(np.arange(len(pts)), face, bary, dist, keep.astype(np.float64))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


class MeshTarget:
    """Known per-vertex correspondence (same topology)."""

    def __init__(self, vertices):
        self.vertices = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)

    def refresh(self, rig, verts):
        pass

    def terms(self, rig, verts, loss):
        lv = loss_vertex(verts, self.vertices, loss.rmse_inside)
        lp = loss_laplacian(rig.laplacian, verts, self.vertices, loss.rmse_inside)
        return lv + loss.lambda_p * lp


class CloudTarget:
    """Point cloud; correspondences rebuilt at every window boundary.

    Residuals are split along the surface normal at each matched point: the
    normal component counts fully and the tangential one is scaled by
    ``tangent_weight``, so the model can slide along the scan between
    rebuilds. No Laplacian term is used because a cloud has no connectivity
    to compare against.
    """

    def __init__(self, cloud, max_distance=None, max_normal_angle=None, tangent_weight=0.1):
        if not 0.0 <= tangent_weight <= 1.0:
            raise FitError("tangent weight must lie in [0, 1]")
        self.cloud = cloud
        self.max_distance = max_distance
        self.max_normal_angle = max_normal_angle
        self.tangent_weight = tangent_weight
        self.corr = None
        self._A = None
        self._rhs = None

    def refresh(self, rig, verts):
        mesh = rig.mesh
        self.corr = build_correspondence(mesh, self.cloud, self.max_distance, self.max_normal_angle, verts)
        kept = self.corr.kept
        B = self.corr.matrix(mesh.faces, mesh.n_vertices)
        vn = vertex_normals(mesh, verts)
        n = np.einsum("mi,mij->mj", self.corr.bary[kept], vn[mesh.faces[self.corr.face[kept]]])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        a = self.tangent_weight
        blocks = a * np.eye(3) + (1.0 - a) * n[:, :, None] * n[:, None, :]
        base = 3 * np.arange(len(n))[:, None, None]
        rows = np.broadcast_to(base + np.arange(3)[None, :, None], blocks.shape).reshape(-1)
        cols = np.broadcast_to(base + np.arange(3)[None, None, :], blocks.shape).reshape(-1)
        P = sp.csr_matrix((blocks.reshape(-1), (rows, cols)), shape=(3 * len(n), 3 * len(n)))
        self._A = (P @ sp.kron(B, sp.identity(3), format="csr")).tocsr()
        self._rhs = (P @ self.cloud.points[kept].reshape(-1)).reshape(-1, 3)

    def terms(self, rig, verts, loss):
        m = len(self._rhs)
        if isinstance(verts, ad.Var):
            proj = ad.reshape(ad.linear_map(self._A, ad.reshape(verts, (-1,))), (m, 3))
        else:
            proj = (self._A @ np.asarray(verts).reshape(-1)).reshape(m, 3)
        return loss_points(proj, self._rhs, rig.mesh.n_vertices, loss.rmse_inside)


class LandmarkTarget:
    """2D landmarks only; no 3D data or Laplacian term."""

    def __init__(self, landmark_idx, pixels, camera):
        self.idx = np.asarray(landmark_idx, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=np.float64)
        self.camera = camera
        if len(self.idx) < 6:
            raise FitError(f"need at least 6 landmarks, got {len(self.idx)}")

    def refresh(self, rig, verts):
        pass

    def terms(self, rig, verts, loss):
        return loss_landmarks_2d(self.camera.project(landmark_points(verts, self.idx)), self.pixels)


# ---------------------------------------------------------------------------
# model evaluation and the optimiser loop
# ---------------------------------------------------------------------------


@dataclass
class FitState:
    pose: np.ndarray
    z: np.ndarray | None = None
    coeffs: np.ndarray | None = None
    free: np.ndarray | None = None

    def copy(self):
        return FitState(*(None if x is None else np.array(x) for x in (self.pose, self.z, self.coeffs, self.free)))


class Model:
    """Bundles a rig with the source of its skinning parameters.

    Weights come from explicit ``free`` parameters when present, else from
    ``linear + decoder(z)`` when a decoder is set, else from ``linear``.
    """

    def __init__(self, rig, linear=None, decoder=None):
        self.rig = rig
        self.linear = rig.weights.free_params if linear is None else np.asarray(linear, dtype=np.float64)
        self.decoder = decoder

    def skin_params(self, z=None, free=None):
        if free is not None:
            return free
        if self.decoder is not None and z is not None:
            return decoder_forward(self.decoder, z, self.linear)
        return self.linear

    def vertices(self, pose, z=None, coeffs=None, free=None):
        full = self.rig.layout.unpack(pose)
        verts = self.rig.deform(pose, self.skin_params(z, free), coeffs if self.rig.n_expressions else None)
        return full, verts

    def objective(self, target, state_vars, loss, lambda_m):
        full, verts = self.vertices(state_vars["pose"], state_vars.get("z"), state_vars.get("coeffs"), state_vars.get("free"))
        sk = self.rig.skeleton
        lr, lt, ls = loss_box_rts(full, sk.limits)
        box = lr + lt + ls
        if state_vars.get("coeffs") is not None and self.rig.n_expressions:
            box = box + loss_box(state_vars["coeffs"], 0.0, 1.0)
        return target.terms(self.rig, verts, loss) + lambda_m * loss_magnitude(full) + loss.lambda_x * box

    def state_vertices(self, state):
        return np.asarray(self.vertices(state.pose, state.z, state.coeffs, state.free)[1])


def _state_dict(state):
    return {k: v for k, v in (("pose", state.pose), ("z", state.z), ("coeffs", state.coeffs),
                              ("free", state.free)) if v is not None}


def run_phase(model, target, state, active, iters, lrs, config, lambda_m=None, history=None, grad_mask=None):
    """Optimise the ``active`` state blocks for ``iters`` Adam steps.

    ``lambda_m`` may be a float or a ``(start, end)`` pair decayed linearly
    over windows. ``grad_mask`` maps a block name to a 0/1 array that freezes
    individual entries. Returns the updated state and appends objective
    values to ``history``.
    """
    grad_mask = grad_mask or {}
    state = state.copy()
    loss = config.loss
    lam = loss.lambda_m if lambda_m is None else lambda_m
    lam0, lam1 = lam if isinstance(lam, tuple) else (lam, lam)
    history = [] if history is None else history
    blocks = _state_dict(state)
    opts = {k: Adam({k: blocks[k]}) for k in active}
    window = max(1, config.refresh_interval)
    n_windows = -(-iters // window) if iters > 0 else 0

    def evaluate(with_grad):
        tape = ad.Tape()
        vars_ = {k: (tape.var(v, name=k) if k in active and with_grad else v) for k, v in blocks.items()}
        if with_grad:
            out = model.objective(target, vars_, loss, lam_w)
            grads = tape.gradient(out, [vars_[k] for k in active])
            return float(out.value), dict(zip(active, grads))
        # at least one Var is needed to record ops; wrap pose as a constant leaf
        vars_ = dict(vars_, pose=tape.var(blocks["pose"]))
        return float(model.objective(target, vars_, loss, lam_w).value), None

    step = 0
    for w in range(n_windows):
        frac = w / max(1, n_windows - 1)
        lam_w = lam0 + (lam1 - lam0) * frac
        target.refresh(model.rig, model.state_vertices(FitState(**blocks)))
        best_val, best = np.inf, None
        for _ in range(min(window, iters - w * window)):
            val, grads = evaluate(True)
            if not np.isfinite(val):
                raise FitError(f"objective became non-finite at step {step}")
            history.append(val)
            if val < best_val:
                best_val, best = val, {k: blocks[k].copy() for k in active}
            scale = config.lr_final_scale ** (step / max(1, iters - 1))
            for k in active:
                g = grads[k] * grad_mask[k] if k in grad_mask else grads[k]
                opts[k].step({k: blocks[k]}, {k: g}, lr=lrs[k] * scale)
            step += 1
        val, _ = evaluate(False)
        if val > best_val:
            for k in active:
                blocks[k][...] = best[k]
    for k, v in blocks.items():
        setattr(state, k, v)
    return state


def objective_value(model, target, state, config, lambda_m=None):
    tape = ad.Tape()
    vars_ = dict(_state_dict(state))
    vars_["pose"] = tape.var(state.pose)
    lam = config.loss.lambda_m if lambda_m is None else lambda_m
    return float(model.objective(target, vars_, config.loss, lam).value)


# ---------------------------------------------------------------------------
# stage 1: global linear weights
# ---------------------------------------------------------------------------


@dataclass
class Stage1Result:
    poses: list
    free_params: np.ndarray
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def _global_weight_objective(rig, poses, targets, loss, pieces=None):
    def build(free):
        total = None
        for pose, tgt in zip(poses, targets):
            full = rig.layout.unpack(pose)
            verts = rig.deform(pose, free)
            term = (tgt.terms(rig, verts, loss) + loss.lambda_m * loss_magnitude(full)
                    + loss.lambda_x * sum(loss_box_rts(full, rig.skeleton.limits)))
            total = term if total is None else total + term
        return total * (1.0 / len(poses))
    return build


def fit_global_weights(rig, poses, targets, free, iters, lr, config, history=None):
    """Fit one shared weight vector across all scans (batch = all scans)."""
    free = np.array(free, dtype=np.float64)
    build = _global_weight_objective(rig, poses, targets, config.loss)
    opt = Adam({"free": free})
    window = max(1, config.refresh_interval)
    best_val, best = np.inf, free.copy()
    for step in range(iters):
        tape = ad.Tape()
        fv = tape.var(free)
        out = build(fv)
        val = float(out.value)
        if not np.isfinite(val):
            raise FitError(f"global weight fit diverged at step {step}")
        if history is not None:
            history.append(val)
        if val < best_val:
            best_val, best = val, free.copy()
        (g,) = tape.gradient(out, [fv])
        opt.step({"free": free}, {"free": g}, lr=lr * config.lr_final_scale ** (step / max(1, iters - 1)))
        if (step + 1) % window == 0 or step == iters - 1:
            tape = ad.Tape()
            if float(build(tape.var(free)).value) > best_val:
                free[...] = best
            best_val = np.inf
    return free


def fit_stage1_linear(rig, scans, config, snapshots_per_fit=0, on_snapshot=None):
    """Alternate per-scan pose fits and one global weight fit.

    ``scans`` are index-aligned target meshes (or vertex arrays). With
    ``snapshots_per_fit = s`` the pose trajectory of every scan is sampled
    at ``s`` evenly spaced iterations per cycle and recorded in
    ``result.snapshots`` as ``(cycle, scan_index, pose)``.
    """
    targets = [MeshTarget(s) for s in scans]
    for t in targets:
        if t.vertices.shape != rig.mesh.vertices.shape:
            raise FitError("scan topology does not match the rig")
    free = rig.weights.free_params.copy()
    poses = [rig.layout.identity() for _ in scans]
    result = Stage1Result(poses, free)
    iters = config.stage1_pose_iters
    marks = set()
    if snapshots_per_fit and iters:
        marks = {int(round((j + 1) * iters / snapshots_per_fit)) for j in range(snapshots_per_fit)}
    for cycle in range(config.stage1_cycles):
        model = Model(rig, free)
        for i, tgt in enumerate(targets):
            state = FitState(poses[i])
            if marks:
                done = 0
                for m in sorted(marks):
                    state = run_phase(model, tgt, state, ["pose"], m - done, {"pose": config.pose_lr},
                                      config, history=result.history)
                    done = m
                    result.snapshots.append((cycle, i, state.pose.copy()))
                    if on_snapshot is not None:
                        on_snapshot(cycle, i, state.pose)
            else:
                state = run_phase(model, tgt, state, ["pose"], iters, {"pose": config.pose_lr}, config,
                                  history=result.history)
            poses[i] = state.pose
        free = fit_global_weights(rig, poses, targets, free, config.stage1_weight_iters, config.weight_lr,
                                  config, result.history)
    result.poses = poses
    result.free_params = free
    return result


# ---------------------------------------------------------------------------
# stage 3: test-time fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    state: FitState
    vertices: np.ndarray
    report: ErrorReport | None
    curves: dict = field(default_factory=dict)

    def to_dict(self):
        s = self.state
        return {
            "pose": s.pose.tolist(),
            "z": None if s.z is None else s.z.tolist(),
            "coeffs": None if s.coeffs is None else s.coeffs.tolist(),
            "report": None if self.report is None else self.report.as_dict(),
            "curves": {k: list(map(float, v)) for k, v in self.curves.items()},
        }


def fit_test_time(model, target, config, fit_z=True, fit_expressions=True, init=None):
    """Pose / latent / expression schedule against a mesh, cloud or landmark target.

    Z starts at zero; each outer cycle runs ``identity_cycles`` rounds of a
    pose phase then a Z phase, followed by an expression phase. The magnitude
    regulariser decays linearly from ``lambda_m`` to ``lambda_m_floor`` over
    every pose phase.
    """
    rig = model.rig
    use_z = fit_z and model.decoder is not None and config.z_iters > 0
    E = rig.n_expressions
    state = init.copy() if init is not None else FitState(
        rig.layout.identity(),
        np.zeros(model.decoder.latent_dim) if model.decoder is not None else None,
        np.zeros(E) if E else None,
    )
    if state.z is None and model.decoder is not None:
        state.z = np.zeros(model.decoder.latent_dim)
    if state.coeffs is None and E:
        state.coeffs = np.zeros(E)
    curves = {"root": [], "pose": [], "z": [], "expr": []}
    decay = (config.loss.lambda_m, config.lambda_m_floor)
    floor = config.lambda_m_floor
    if config.root_warmup_iters > 0 and init is None:
        root = np.array([k == 0 for k, _ in rig.layout.owners], dtype=np.float64)
        state = run_phase(model, target, state, ["pose"], config.root_warmup_iters,
                          {"pose": config.root_warmup_lr}, config, config.loss.lambda_m, curves["root"],
                          grad_mask={"pose": root})
    for _ in range(config.outer_cycles):
        for _ in range(config.identity_cycles):
            state = run_phase(model, target, state, ["pose"], config.pose_iters, {"pose": config.pose_lr},
                              config, decay, curves["pose"])
            if use_z:
                active = ["pose", "z"] if config.joint_z_phase else ["z"]
                state = run_phase(model, target, state, active, config.z_iters,
                                  {"pose": config.pose_lr, "z": config.z_lr}, config, floor, curves["z"])
        if E and fit_expressions and config.expr_iters > 0:
            state = run_phase(model, target, state, ["coeffs"], config.expr_iters, {"coeffs": config.expr_lr},
                              config, floor, curves["expr"])
    verts = model.state_vertices(state)
    report = None
    if isinstance(target, CloudTarget):
        report = scan_to_mesh_distance(target.cloud, rig.mesh.with_vertices(verts))
    elif isinstance(target, MeshTarget):
        report = point_to_point_error(verts, target.vertices)
    return FitResult(state, verts, report, curves)


def fit_cloud(model, cloud, config, **kw):
    diag = model.rig.mesh.bbox_diagonal()
    target = CloudTarget(cloud, config.icp_max_distance * diag if config.icp_max_distance else None,
                         config.icp_max_normal_angle, config.icp_tangent_weight)
    return fit_test_time(model, target, config, **kw)


def fit_landmarks_2d(model, landmark_idx, pixels, camera, config, fit_z=True):
    """Fit pose (and Z / expressions) using 2D landmarks as the only data term."""
    target = LandmarkTarget(landmark_idx, pixels, camera)
    return fit_test_time(model, target, config, fit_z=fit_z)


# ---------------------------------------------------------------------------
# retargeting and evaluation
# ---------------------------------------------------------------------------


def transfer_slots(layout, joints, root=True):
    """Packed-slot indices driven by the listed expression joints (plus the root)."""
    chosen = set(joints) | ({0} if root else set())
    return np.array(sorted({s for (k, _), s in layout.slot_of.items() if k in chosen}), dtype=np.int64)


def retarget(source_state, target_model, target_state, slots):
    """Apply the source's expression coefficients and transferable pose slots
    to the target identity; identity-shaping slots keep the target's values."""
    if len(source_state.pose) != len(target_state.pose):
        raise FitError("source and target rigs have different pose layouts")
    pose = np.array(target_state.pose)
    slots = np.asarray(slots, dtype=np.int64)
    pose[slots] = source_state.pose[slots]
    coeffs = target_state.coeffs
    if source_state.coeffs is not None:
        if target_state.coeffs is None or len(source_state.coeffs) != len(target_state.coeffs):
            raise FitError("expression schemas differ")
        coeffs = np.array(source_state.coeffs)
    new = FitState(pose, target_state.z, coeffs, target_state.free)
    return target_model.state_vertices(new), new


def evaluate(vertices, reference, faces=None):
    """Error of a fitted surface against a mesh (point-to-point) or cloud (scan-to-mesh).

    No rigid pre-alignment is applied.
    """
    if isinstance(reference, PointCloud):
        if faces is None and not isinstance(vertices, Mesh):
            raise GeometryError("scan-to-mesh evaluation needs mesh faces")
        mesh = vertices if isinstance(vertices, Mesh) else Mesh(vertices, faces)
        return scan_to_mesh_distance(reference, mesh)
    if isinstance(reference, (Mesh, np.ndarray)):
        return point_to_point_error(vertices, reference)
    raise GeometryError(f"cannot evaluate against {type(reference).__name__}")


def save_fit_result(result, path):
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=1)


def load_fit_state(path):
    with open(path) as fh:
        d = json.load(fh)
    arr = lambda x: None if x is None else np.asarray(x, dtype=np.float64)  # noqa: E731
    return FitState(arr(d["pose"]), arr(d.get("z")), arr(d.get("coeffs")))
