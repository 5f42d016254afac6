"""Hot numeric kernels.

Every kernel has a numba implementation and a numpy implementation with the
same signature. The public name dispatches on ``rigfit._accel.USE_NUMBA``;
both variants stay importable so they can be cross-checked and benchmarked.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# linear blend skinning
# ---------------------------------------------------------------------------

@njit
def _lbs_forward_nb(weights, mats, verts):
    n, k = weights.shape
    out = np.zeros((n, 3))
    for i in range(n):
        x, y, z = verts[i, 0], verts[i, 1], verts[i, 2]
        for j in range(k):
            w = weights[i, j]
            if w == 0.0:
                continue
            m = mats[j]
            for r in range(3):
                out[i, r] += w * (m[r, 0] * x + m[r, 1] * y + m[r, 2] * z + m[r, 3])
    return out


def _lbs_forward_np(weights, mats, verts):
    blended = weights @ mats[:, :3, :].reshape(len(mats), 12)
    blended = blended.reshape(-1, 3, 4)
    return np.einsum("nij,nj->ni", blended[:, :, :3], verts) + blended[:, :, 3]


@njit
def _lbs_backward_nb(grad_out, weights, mats, verts):
    n, k = weights.shape
    g_w = np.zeros((n, k))
    g_m = np.zeros((k, 4, 4))
    for i in range(n):
        x, y, z = verts[i, 0], verts[i, 1], verts[i, 2]
        gx, gy, gz = grad_out[i, 0], grad_out[i, 1], grad_out[i, 2]
        for j in range(k):
            m = mats[j]
            tx = m[0, 0] * x + m[0, 1] * y + m[0, 2] * z + m[0, 3]
            ty = m[1, 0] * x + m[1, 1] * y + m[1, 2] * z + m[1, 3]
            tz = m[2, 0] * x + m[2, 1] * y + m[2, 2] * z + m[2, 3]
            g_w[i, j] = gx * tx + gy * ty + gz * tz
            w = weights[i, j]
            if w == 0.0:
                continue
            for r in range(3):
                gr = w * grad_out[i, r]
                g_m[j, r, 0] += gr * x
                g_m[j, r, 1] += gr * y
                g_m[j, r, 2] += gr * z
                g_m[j, r, 3] += gr
    return g_w, g_m


def _lbs_backward_np(grad_out, weights, mats, verts):
    homo = np.concatenate([verts, np.ones((len(verts), 1))], axis=1)
    moved = np.einsum("kij,nj->nki", mats[:, :3, :], homo)
    g_w = np.einsum("nki,ni->nk", moved, grad_out)
    g_m = np.zeros((len(mats), 4, 4))
    g_m[:, :3, :] = np.einsum("nk,ni,nj->kij", weights, grad_out, homo)
    return g_w, g_m


def lbs_forward(weights, mats, verts):
    """Blend ``K`` 4x4 matrices per vertex: ``sum_k w[n,k] * (M_k @ [v_n, 1])``."""
    if USE_NUMBA:
        return _lbs_forward_nb(weights, mats, verts)
    return _lbs_forward_np(weights, mats, verts)


def lbs_backward(grad_out, weights, mats, verts):
    """Vector-Jacobian product of :func:`lbs_forward` w.r.t. weights and matrices."""
    if USE_NUMBA:
        return _lbs_backward_nb(grad_out, weights, mats, verts)
    return _lbs_backward_np(grad_out, weights, mats, verts)


# ---------------------------------------------------------------------------
# closest point on a triangle soup
# ---------------------------------------------------------------------------

@njit
def _closest_on_triangle(p, a, b, c):
    # Voronoi-region walk; returns barycentric (u, v, w) of the closest point.
    ab0, ab1, ab2 = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    ac0, ac1, ac2 = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    ap0, ap1, ap2 = p[0] - a[0], p[1] - a[1], p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0, bp1, bp2 = p[0] - b[0], p[1] - b[1], p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return 1.0 - t, t, 0.0
    cp0, cp1, cp2 = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return 1.0 - t, 0.0, t
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - t, t
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit
def _closest_points_nb(points, verts, faces):
    m = points.shape[0]
    dist = np.empty(m)
    tri = np.empty(m, dtype=np.int64)
    bary = np.empty((m, 3))
    for i in range(m):
        p = points[i]
        best = np.inf
        for f in range(faces.shape[0]):
            a = verts[faces[f, 0]]
            b = verts[faces[f, 1]]
            c = verts[faces[f, 2]]
            u, v, w = _closest_on_triangle(p, a, b, c)
            q0 = u * a[0] + v * b[0] + w * c[0] - p[0]
            q1 = u * a[1] + v * b[1] + w * c[1] - p[1]
            q2 = u * a[2] + v * b[2] + w * c[2] - p[2]
            d = q0 * q0 + q1 * q1 + q2 * q2
            if d < best:
                best = d
                tri[i] = f
                bary[i, 0] = u
                bary[i, 1] = v
                bary[i, 2] = w
        dist[i] = np.sqrt(best)
    return dist, tri, bary


def _closest_on_triangles_np(p, a, b, c):
    # Same region walk as the scalar version, evaluated for all triangles at once.
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    bary = np.empty((len(a), 3))
    done = np.zeros(len(a), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    def assign(mask, u, v, w):
        sel = mask & ~done
        bary[sel, 0] = u[sel] if np.ndim(u) else u
        bary[sel, 1] = v[sel] if np.ndim(v) else v
        bary[sel, 2] = w[sel] if np.ndim(w) else w
        done[sel] = True

    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)
    assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), 0.0, 1.0 - t_bc, t_bc)
    assign(np.ones(len(a), dtype=bool), 1.0 - v_in - w_in, v_in, w_in)
    return bary


def _closest_points_np(points, verts, faces):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    m = len(points)
    dist = np.empty(m)
    tri = np.empty(m, dtype=np.int64)
    bary = np.empty((m, 3))
    for i in range(m):
        p = points[i]
        bc = _closest_on_triangles_np(p[None, :], a, b, c)
        q = bc[:, :1] * a + bc[:, 1:2] * b + bc[:, 2:] * c - p
        d = np.einsum("ij,ij->i", q, q)
        f = int(np.argmin(d))
        dist[i] = np.sqrt(d[f])
        tri[i] = f
        bary[i] = bc[f]
    return dist, tri, bary


def closest_points_on_mesh(points, verts, faces):
    """Exhaustive closest surface point for each query point.

    Returns ``(distance, triangle_index, barycentric)``; ties go to the lowest
    triangle index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    verts = np.ascontiguousarray(verts, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if USE_NUMBA:
        return _closest_points_nb(points, verts, faces)
    return _closest_points_np(points, verts, faces)
