"""Joint-based rig: hierarchy, pose packing, sparse symmetric skinning weights,
linear blend skinning and expression blendshapes.

Conventions
-----------
* Column vectors: a vertex moves as ``M @ [x, y, z, 1]``.
* A joint's local transform is ``Translate(T) @ Rz @ Ry @ Rx @ Scale(S)`` and
  is applied after its bind-local matrix.
* DOF order per joint is ``Rx Ry Rz Tx Ty Tz Sx Sy Sz``.
* Mirror plane is ``x = 0``; mirrored joints share a pose slot with signs
  flipped on ``Tx``, ``Ry`` and ``Rz``.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import kernels
from .geometry import Mesh, laplacian_matrix

DOF_NAMES = ("Rx", "Ry", "Rz", "Tx", "Ty", "Tz", "Sx", "Sy", "Sz")
ROT = slice(0, 3)
TRANS = slice(3, 6)
SCALE = slice(6, 9)
MIRROR_SIGN = np.array([1, -1, -1, -1, 1, 1, 1, 1, 1], dtype=np.float64)
IDENTITY_DOF = np.array([0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=np.float64)


class RigError(ValueError):
    pass


@dataclass
class Joint:
    name: str
    parent: int | None
    bind_local: np.ndarray = field(default_factory=lambda: np.eye(4))
    dof_mask: np.ndarray = field(default_factory=lambda: np.ones(9, dtype=bool))
    limits: np.ndarray = field(default_factory=lambda: np.tile([-np.inf, np.inf], (9, 1)))
    symmetry_partner: int | None = None

    def __post_init__(self):
        self.bind_local = np.array(self.bind_local, dtype=np.float64).reshape(4, 4)
        self.dof_mask = np.array(self.dof_mask, dtype=bool).reshape(9)
        self.limits = np.array(self.limits, dtype=np.float64).reshape(9, 2)
        if np.any(self.limits[:, 0] > self.limits[:, 1]):
            raise RigError(f"joint {self.name!r}: x_min > x_max")


class Skeleton:
    """Topologically ordered joint hierarchy (root first)."""

    def __init__(self, joints):
        self.joints = list(joints)
        if not self.joints:
            raise RigError("skeleton needs at least one joint")
        roots = [k for k, j in enumerate(self.joints) if j.parent is None]
        if roots != [0]:
            raise RigError(f"exactly one root at index 0 required, got roots {roots}")
        for k, j in enumerate(self.joints):
            if j.parent is not None and not 0 <= j.parent < k:
                raise RigError(f"joint {j.name!r}: parent {j.parent} must precede it")
            p = j.symmetry_partner
            if p is not None:
                if not 0 <= p < len(self.joints):
                    raise RigError(f"joint {j.name!r}: bad symmetry partner {p}")
                if self.joints[p].symmetry_partner != k:
                    raise RigError(f"symmetry of {j.name!r} is not involutive")
                if not np.array_equal(self.joints[p].dof_mask, j.dof_mask):
                    raise RigError(f"mirrored joints {j.name!r}/{self.joints[p].name!r} need equal DOF masks")
        self.parents = np.array([-1 if j.parent is None else j.parent for j in self.joints])
        self.bind_local = np.stack([j.bind_local for j in self.joints])
        gb = np.empty_like(self.bind_local)
        for k in range(self.K):
            gb[k] = self.bind_local[k] if k == 0 else gb[self.parents[k]] @ self.bind_local[k]
        if np.any(np.abs(np.linalg.det(gb)) < 1e-12):
            raise RigError("global bind matrix is not invertible")
        self.global_bind = gb
        self.inv_global_bind = np.linalg.inv(gb)
        self.limits = np.stack([j.limits for j in self.joints])
        self.dof_mask = np.stack([j.dof_mask for j in self.joints])
        self.layout = PoseLayout(self)

    @property
    def K(self):
        return len(self.joints)

    def partner(self, k):
        p = self.joints[k].symmetry_partner
        return k if p is None else p

    def joint_positions(self):
        return self.global_bind[:, :3, 3].copy()


class PoseLayout:
    """Maps the packed free vector to full per-joint DOF arrays.

    ``full = offset + A @ packed`` (reshaped to ``K x 9``); masked DOFs take
    their identity value and mirrored joints reuse their partner's slot.
    """

    def __init__(self, skeleton):
        K = skeleton.K
        slot_of = {}
        rows, cols, vals = [], [], []
        owners = []
        for k, joint in enumerate(skeleton.joints):
            p = joint.symmetry_partner
            for d in range(9):
                if not joint.dof_mask[d]:
                    continue
                if p is not None and p < k:
                    slot, sign = slot_of[(p, d)], MIRROR_SIGN[d]
                else:
                    slot, sign = len(owners), 1.0
                    owners.append((k, d))
                slot_of[(k, d)] = slot
                rows.append(9 * k + d)
                cols.append(slot)
                vals.append(sign)
        self.K = K
        self.size = len(owners)
        self.owners = owners
        self.slot_of = slot_of
        self.matrix = sp.csr_matrix((vals, (rows, cols)), shape=(9 * K, self.size))
        self.mask = skeleton.dof_mask.copy()
        self.offset = np.where(self.mask, 0.0, IDENTITY_DOF).reshape(-1)
        self._midline_flip = np.ones(self.size)
        for s, (k, d) in enumerate(owners):
            if skeleton.joints[k].symmetry_partner in (None, k):
                self._midline_flip[s] = MIRROR_SIGN[d]

    def unpack(self, packed):
        """``K x 9`` DOF array from a packed vector (Var or array)."""
        if isinstance(packed, ad.Var):
            return ad.reshape(ad.linear_map(self.matrix, packed) + self.offset, (self.K, 9))
        return (self.matrix @ np.asarray(packed, dtype=np.float64) + self.offset).reshape(self.K, 9)

    def pack(self, full):
        full = np.asarray(full, dtype=np.float64).reshape(self.K, 9)
        return np.array([full[k, d] for k, d in self.owners])

    def identity(self):
        return np.array([IDENTITY_DOF[d] for _, d in self.owners])

    def mirror(self, packed):
        """Packed vector of the pose mirrored across the sagittal plane."""
        return np.asarray(packed, dtype=np.float64) * self._midline_flip

    def limits(self, skeleton):
        lim = np.array([skeleton.limits[k, d] for k, d in self.owners]).reshape(-1, 2)
        return lim[:, 0], lim[:, 1]


def identity_pose(K):
    return np.tile(IDENTITY_DOF, (K, 1))


# ---------------------------------------------------------------------------
# skinning matrices (fused primitive)
# ---------------------------------------------------------------------------

def _euler(r):
    """Rz @ Ry @ Rx and its three partial derivatives, batched over joints."""
    a, b, c = r[:, 0], r[:, 1], r[:, 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    n = len(r)
    z, o = np.zeros(n), np.ones(n)

    def mat(rows):
        return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)

    Rx = mat([[o, z, z], [z, ca, -sa], [z, sa, ca]])
    Ry = mat([[cb, z, sb], [z, o, z], [-sb, z, cb]])
    Rz = mat([[cc, -sc, z], [sc, cc, z], [z, z, o]])
    dRx = mat([[z, z, z], [z, -sa, -ca], [z, ca, -sa]])
    dRy = mat([[-sb, z, cb], [z, z, z], [-cb, z, -sb]])
    dRz = mat([[-sc, -cc, z], [cc, -sc, z], [z, z, z]])
    R = Rz @ Ry @ Rx
    return R, (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)


def local_transforms(full):
    """Per-joint ``Translate @ Rotate @ Scale`` 4x4 matrices from ``K x 9`` DOFs."""
    full = np.asarray(full, dtype=np.float64)
    R, _ = _euler(full[:, ROT])
    Q = np.zeros((len(full), 4, 4))
    Q[:, :3, :3] = R * full[:, None, SCALE]
    Q[:, :3, 3] = full[:, TRANS]
    Q[:, 3, 3] = 1.0
    return Q


def _compose(skeleton, full):
    K = skeleton.K
    R, dR = _euler(full[:, ROT])
    s = full[:, SCALE]
    Q = np.zeros((K, 4, 4))
    Q[:, :3, :3] = R * s[:, None, :]
    Q[:, :3, 3] = full[:, TRANS]
    Q[:, 3, 3] = 1.0
    L = skeleton.bind_local @ Q
    G = np.empty((K, 4, 4))
    par = skeleton.parents
    for k in range(K):
        G[k] = L[k] if par[k] < 0 else G[par[k]] @ L[k]
    M = G @ skeleton.inv_global_bind
    return M, (R, dR, s, L, G)


def compose_skinning_matrices(skeleton, pose):
    """Skinning matrices ``M_k = G_k @ inv(global_bind_k)`` with
    ``G_k = G_parent @ bind_local_k @ local(tau_k)``.

    ``pose`` is a ``K x 9`` DOF array or a Var of that shape. The identity
    pose gives identity matrices for every joint.
    """
    if not isinstance(pose, ad.Var):
        return _compose(skeleton, np.asarray(pose, dtype=np.float64))[0]

    full = pose.value
    M, (R, dR, s, L, G) = _compose(skeleton, full)
    par = skeleton.parents

    def vjp(gM):
        K = skeleton.K
        gG = gM @ np.swapaxes(skeleton.inv_global_bind, 1, 2)
        gL = np.empty_like(gG)
        for k in range(K - 1, -1, -1):
            p = par[k]
            if p < 0:
                gL[k] = gG[k]
            else:
                gL[k] = G[p].T @ gG[k]
                gG[p] += gG[k] @ L[k].T
        gQ = np.swapaxes(skeleton.bind_local, 1, 2) @ gL
        gRS = gQ[:, :3, :3]
        out = np.zeros((K, 9))
        out[:, TRANS] = gQ[:, :3, 3]
        out[:, SCALE] = np.einsum("kij,kij->kj", gRS, R)
        gR = gRS * s[:, None, :]
        for i in range(3):
            out[:, i] = np.einsum("kij,kij->k", gR, dR[i])
        return (out,)

    return pose.tape.record(M, (pose,), vjp)


# ---------------------------------------------------------------------------
# skinning weights
# ---------------------------------------------------------------------------

class SkinningWeights:
    """Sparse, symmetric skinning weights.

    Each supported (vertex, joint) cell belongs to a symmetry class; every
    class owns one free parameter. :meth:`expand` scatters the parameters
    into an ``N x K`` matrix and renormalises each row to sum to one.
    """

    def __init__(self, n_vertices, n_joints, cells, cell_class, free_params):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        cell_class = np.asarray(cell_class, dtype=np.int64).reshape(-1)
        self.N, self.K = int(n_vertices), int(n_joints)
        if len(cell_class) != len(cells):
            raise RigError("one class id per supported cell required")
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        self.cells = cells[order]
        self.cell_class = cell_class[order]
        self.n_classes = int(self.cell_class.max()) + 1 if len(cells) else 0
        if len(cells) and set(np.unique(self.cell_class)) != set(range(self.n_classes)):
            raise RigError("symmetry classes must be numbered 0..C-1 without gaps")
        if np.any(self.cells < 0) or np.any(self.cells[:, 0] >= self.N) or np.any(self.cells[:, 1] >= self.K):
            raise RigError("support cell out of range")
        supported = np.zeros(self.N, dtype=bool)
        supported[self.cells[:, 0]] = True
        if not supported.all():
            raise RigError(f"vertex {int(np.argmin(supported))} has empty weight support")
        self.free_params = np.array(free_params, dtype=np.float64).reshape(-1)
        if len(self.free_params) != self.n_classes:
            raise RigError(f"{len(self.free_params)} free params for {self.n_classes} classes")
        n_cells = len(self.cells)
        self._gather = sp.csr_matrix(
            (np.ones(n_cells), (np.arange(n_cells), self.cell_class)), shape=(n_cells, self.n_classes)
        )
        self._rowsum = sp.csr_matrix(
            (np.ones(n_cells), (self.cells[:, 0], np.arange(n_cells))), shape=(self.N, n_cells)
        )
        flat = self.cells[:, 0] * self.K + self.cells[:, 1]
        self._scatter = sp.csr_matrix((np.ones(n_cells), (flat, np.arange(n_cells))), shape=(self.N * self.K, n_cells))

    @property
    def support_mask(self):
        mask = np.zeros((self.N, self.K), dtype=bool)
        mask[self.cells[:, 0], self.cells[:, 1]] = True
        return mask

    def with_params(self, free_params):
        return SkinningWeights(self.N, self.K, self.cells, self.cell_class, free_params)

    def expand(self, free_params=None):
        """Dense ``N x K`` weights (array or Var, following the input)."""
        x = self.free_params if free_params is None else free_params
        if isinstance(x, ad.Var):
            vals = ad.linear_map(self._gather, x)
            per_cell = ad.linear_map(self._rowsum.T, ad.linear_map(self._rowsum, vals))
            return ad.reshape(ad.linear_map(self._scatter, vals / per_cell), (self.N, self.K))
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise RigError("non-finite skinning weight parameters")
        vals = self._gather @ x
        vals = vals / (self._rowsum.T @ (self._rowsum @ vals))
        return (self._scatter @ vals).reshape(self.N, self.K)

    def class_values_from_dense(self, dense):
        """Average a dense matrix over each symmetry class (inverse of expand up to row scaling)."""
        vals = np.asarray(dense)[self.cells[:, 0], self.cells[:, 1]]
        counts = np.bincount(self.cell_class, minlength=self.n_classes)
        return np.bincount(self.cell_class, weights=vals, minlength=self.n_classes) / counts


def symmetry_classes(support_mask, vertex_mirror, joint_mirror):
    """Group supported cells into orbits of ``(n, k) -> (mirror(n), partner(k))``.

    Returns ``(cells, cell_class)``. A cell whose mirror is unsupported forms
    its own class.
    """
    support_mask = np.asarray(support_mask, dtype=bool)
    cells = np.argwhere(support_mask)
    cls = -np.ones(support_mask.shape, dtype=np.int64)
    nxt = 0
    for n, k in cells:
        if cls[n, k] >= 0:
            continue
        cls[n, k] = nxt
        mn, mk = vertex_mirror[n], joint_mirror[k]
        if support_mask[mn, mk] and cls[mn, mk] < 0:
            cls[mn, mk] = nxt
        nxt += 1
    return cells, cls[cells[:, 0], cells[:, 1]]


# ---------------------------------------------------------------------------
# skinning and expressions
# ---------------------------------------------------------------------------

def apply_lbs(rest_vertices, weights, matrices):
    """Linear blend skinning; Var inputs produce a Var output."""
    rest = np.asarray(getattr(rest_vertices, "vertices", rest_vertices), dtype=np.float64)
    if not isinstance(weights, ad.Var) and not isinstance(matrices, ad.Var):
        w = np.asarray(weights, dtype=np.float64)
        m = np.asarray(matrices, dtype=np.float64)
        _check_lbs(rest, w, m)
        return kernels.lbs_forward(np.ascontiguousarray(w), np.ascontiguousarray(m), rest)
    w, m = ad.value_of(weights), ad.value_of(matrices)
    _check_lbs(rest, w, m)
    w = np.ascontiguousarray(w)
    m = np.ascontiguousarray(m)
    out = kernels.lbs_forward(w, m, rest)

    def vjp(g):
        gw, gm = kernels.lbs_backward(np.ascontiguousarray(g), w, m, rest)
        return gw, gm

    return ad._tape_of(weights, matrices).record(out, (weights, matrices), vjp)


def _check_lbs(rest, w, m):
    if w.shape != (len(rest), len(m)) or m.shape[1:] != (4, 4):
        raise RigError(f"LBS shape mismatch: vertices {rest.shape}, weights {w.shape}, matrices {m.shape}")


@dataclass
class ExpressionBasis:
    deltas: np.ndarray

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 3 or self.deltas.shape[2] != 3:
            raise RigError(f"expression deltas must be E x N x 3, got {self.deltas.shape}")

    @property
    def E(self):
        return len(self.deltas)


def apply_expressions(vertices, basis, coeffs):
    """``v + sum_e coeffs[e] * deltas[e]``."""
    E, N, _ = basis.deltas.shape
    if np.shape(ad.value_of(coeffs)) != (E,) or ad.value_of(vertices).shape != (N, 3):
        raise RigError("expression coefficient/vertex shape mismatch")
    flat = basis.deltas.reshape(E, N * 3)
    if isinstance(coeffs, ad.Var):
        return vertices + ad.reshape(ad.matmul(coeffs, flat), (N, 3))
    return vertices + (np.asarray(coeffs) @ flat).reshape(N, 3)


def count_free_parameters(skeleton, weights):
    return skeleton.layout.size, weights.n_classes


# ---------------------------------------------------------------------------
# rig bundle
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Rig:
    mesh: Mesh
    skeleton: Skeleton
    weights: SkinningWeights
    expressions: ExpressionBasis | None = None
    vertex_mirror: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.N != self.mesh.n_vertices or self.weights.K != self.skeleton.K:
            raise RigError("weights do not match mesh/skeleton")
        if self.expressions is not None and self.expressions.deltas.shape[1] != self.mesh.n_vertices:
            raise RigError("expression basis does not match mesh")
        self._lap = None

    @property
    def layout(self):
        return self.skeleton.layout

    @property
    def n_expressions(self):
        return 0 if self.expressions is None else self.expressions.E

    @property
    def laplacian(self):
        if self._lap is None:
            self._lap = laplacian_matrix(self.mesh)
        return self._lap

    def with_weights(self, free_params):
        return Rig(self.mesh, self.skeleton, self.weights.with_params(free_params), self.expressions, self.vertex_mirror)

    def deform(self, packed_pose, free_weights=None, coeffs=None):
        """Posed vertices. Any Var argument makes the result a Var on its tape."""
        full = self.layout.unpack(packed_pose)
        mats = compose_skinning_matrices(self.skeleton, full)
        dense = self.weights.expand(free_weights)
        verts = apply_lbs(self.mesh.vertices, dense, mats)
        if coeffs is not None and self.expressions is not None:
            verts = apply_expressions(verts, self.expressions, coeffs)
        return verts
