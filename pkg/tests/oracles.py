"""Brute-force reference implementations used by the tests.

These use different algorithms from the library so shared bugs are unlikely.
"""
import numpy as np


def closest_on_triangle_bruteforce(p, a, b, c):
    """Project onto the plane; if outside, take the best of the three edge clamps."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentric of the projection via areas
    def inside(q):
        c1 = np.dot(np.cross(b - a, q - a), n)
        c2 = np.dot(np.cross(c - b, q - b), n)
        c3 = np.dot(np.cross(a - c, q - c), n)
        return c1 >= 0 and c2 >= 0 and c3 >= 0
    if inside(q):
        return q
    best, best_d = None, np.inf
    for u, v in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0.0, 1.0)
        x = u + t * (v - u)
        d = np.linalg.norm(p - x)
        if d < best_d:
            best, best_d = x, d
    return best


def scan_to_mesh_bruteforce(points, verts, faces):
    out = np.empty(len(points))
    for i, p in enumerate(points):
        out[i] = min(np.linalg.norm(p - closest_on_triangle_bruteforce(p, *verts[f])) for f in faces)
    return out


def nearest_bruteforce(points, queries):
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for i, q in enumerate(queries):
        d = np.sqrt(((points - q) ** 2).sum(1))
        idx[i] = int(np.flatnonzero(d == d.min())[0])
        dist[i] = d[idx[i]]
    return dist, idx


def lbs_loop(rest, weights, mats):
    out = np.zeros_like(rest)
    for n in range(len(rest)):
        h = np.append(rest[n], 1.0)
        for k in range(len(mats)):
            out[n] += weights[n, k] * (mats[k] @ h)[:3]
    return out


def random_mesh(rng, n_faces=30):
    """Triangle soup with distinct, non-degenerate triangles."""
    verts = rng.normal(size=(3 * n_faces, 3))
    faces = np.arange(3 * n_faces).reshape(-1, 3)
    return verts, faces


def rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))
