"""Fitting objectives.

Inputs may be numpy arrays or :class:`~rigfit.autodiff.Var`; results follow
the inputs. Pose arguments are the full ``K x 9`` DOF arrays
(``Rx Ry Rz Tx Ty Tz Sx Sy Sz``), not packed vectors.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rig import ROT, SCALE, TRANS


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_m: float = 0.03
    lambda_x: float = 0.3
    lambda_p: float = 0.3
    # Put 1/N inside the square root (true RMSE) instead of outside it.
    rmse_inside: bool = False

    @classmethod
    def from_mapping(cls, cfg):
        cfg = cfg or {}
        return cls(**{k: cfg[k] for k in ("lambda_m", "lambda_x", "lambda_p", "rmse_inside") if k in cfg})


def _is_var(*xs):
    return any(isinstance(x, ad.Var) for x in xs)


def _sqrt(x):
    return ad.sqrt(x) if isinstance(x, ad.Var) else np.sqrt(x)


def _abs(x):
    return ad.vabs(x) if isinstance(x, ad.Var) else np.abs(x)


def _sumsq(x):
    return ad.square(x).sum() if isinstance(x, ad.Var) else float(np.sum(x * x))


def _rms_form(diff, n, inside):
    if n == 0:
        raise LossError("empty vertex set")
    if inside:
        return _sqrt(_sumsq(diff) * (1.0 / n))
    return _sqrt(_sumsq(diff)) * (1.0 / n)


def loss_vertex(v_pred, v_target, rmse_inside=False):
    """``(1/N) * sqrt(sum_n |v_pred_n - v_target_n|^2)``."""
    n = np.shape(ad.value_of(v_pred))[0]
    if np.shape(ad.value_of(v_target))[0] != n:
        raise LossError("vertex count mismatch")
    return _rms_form(v_pred - v_target, n, rmse_inside)


def loss_points(p_pred, p_target, n_vertices, rmse_inside=False):
    """Vertex loss over ``M`` surface correspondences, rescaled to ``n_vertices``.

    The squared sum is multiplied by ``n_vertices / M`` so the value does not
    depend on scan density and equals :func:`loss_vertex` when ``M == N``.
    """
    m = np.shape(ad.value_of(p_pred))[0]
    if m == 0 or np.shape(ad.value_of(p_target))[0] != m:
        raise LossError("correspondence count mismatch")
    return _rms_form((p_pred - p_target) * float(np.sqrt(n_vertices / m)), n_vertices, rmse_inside)


def loss_magnitude(pose):
    """Mean over joints of ``|R|_1 + |T|_1 + |S - 1|_1``: pulls every joint to identity."""
    K = np.shape(ad.value_of(pose))[0]
    shifted = pose - np.tile([0, 0, 0, 0, 0, 0, 1, 1, 1], (K, 1))
    return _abs(shifted).sum() * (1.0 / K)


def loss_box(values, lo, hi, count=None):
    """Summed distance outside ``[lo, hi]`` divided by ``count`` (the joint count).

    Zero inside the box, including when a value sits exactly on a bound.
    """
    count = np.shape(ad.value_of(values))[0] if count is None else count
    if isinstance(values, ad.Var):
        return ad.box_penalty(values, lo, hi).sum() * (1.0 / count)
    v = np.asarray(values, dtype=np.float64)
    pen = np.where(v > hi, v - hi, 0.0) + np.where(v < lo, lo - v, 0.0)
    return float(pen.sum()) / count


def loss_box_rts(pose, limits):
    """Box penalties on rotations, translations and scales: ``(L_R, L_T, L_S)``."""
    limits = np.asarray(limits, dtype=np.float64)
    out = []
    for part in (ROT, TRANS, SCALE):
        out.append(loss_box(pose[:, part], limits[:, part, 0], limits[:, part, 1]))
    return tuple(out)


def loss_laplacian(lap, v_pred, v_target, rmse_inside=False):
    """Vertex-loss-style norm of the difference of umbrella Laplacians.

    ``lap`` is the sparse operator from :func:`rigfit.geometry.laplacian_matrix`.
    """
    n = lap.shape[0]
    if isinstance(v_pred, ad.Var):
        dp = ad.linear_map(lap, v_pred)
    else:
        dp = lap @ np.asarray(v_pred)
    dg = lap @ np.asarray(v_target, dtype=np.float64)
    return _rms_form(dp - dg, n, rmse_inside)


def loss_total(v_pred, v_target, pose, limits, lap, weights=None, coeffs=None, parts=None):
    """``L_v + lambda_m L_m + lambda_x (L_R + L_T + L_S) + lambda_p L_p``.

    When expression ``coeffs`` are given they get an extra ``[0, 1]`` box
    penalty inside the ``lambda_x`` group. Pass a dict as ``parts`` to receive
    the unweighted components.
    """
    w = weights or LossWeights()
    lv = loss_vertex(v_pred, v_target, w.rmse_inside)
    lm = loss_magnitude(pose)
    lr, lt, ls = loss_box_rts(pose, limits)
    lp = loss_laplacian(lap, v_pred, v_target, w.rmse_inside)
    box = lr + lt + ls
    if coeffs is not None:
        box = box + loss_box(coeffs, 0.0, 1.0)
    total = lv + w.lambda_m * lm + w.lambda_x * box + w.lambda_p * lp
    if parts is not None:
        parts.update(L_v=ad.value_of(lv), L_m=ad.value_of(lm), L_R=ad.value_of(lr),
                     L_T=ad.value_of(lt), L_S=ad.value_of(ls), L_p=ad.value_of(lp))
    return total


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map model space to camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 512
    height: int = 512
    rotation: np.ndarray = None
    translation: np.ndarray = None

    def __post_init__(self):
        self.rotation = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.zeros(3) if self.translation is None else np.asarray(self.translation, dtype=np.float64)

    def project(self, points):
        """``L x 3`` model points to ``L x 2`` pixels."""
        cam = points @ self.rotation.T + self.translation
        z = ad.value_of(cam)[:, 2]
        if np.any(z <= 0):
            raise LossError("landmark behind the camera")
        if isinstance(cam, ad.Var):
            xy = cam[:, 0:2] / cam[:, 2:3]
        else:
            xy = cam[:, :2] / cam[:, 2:3]
        return xy * np.array([self.fx, self.fy]) + np.array([self.cx, self.cy])

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def loss_landmarks_2d(projected, target):
    """Mean Euclidean pixel distance between projected and target landmarks."""
    target = np.asarray(target, dtype=np.float64)
    if np.shape(ad.value_of(projected)) != target.shape:
        raise LossError("landmark count mismatch")
    d = projected - target
    if isinstance(d, ad.Var):
        return ad.mean(ad.sqrt(ad.square(d).sum(axis=1)))
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def landmark_points(vertices, landmark_idx):
    idx = np.asarray(landmark_idx, dtype=np.int64)
    n = np.shape(ad.value_of(vertices))[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise LossError("landmark vertex index out of range")
    return vertices[idx]
