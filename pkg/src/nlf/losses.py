"""Objective terms and evaluation metrics.

Differentiable terms take and return :class:`Tensor` objects; metric
functions work on plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .base_shape import mask_iou  # noqa: F401  (re-exported)
from .engine import Tensor, ad
from .engine.autodiff import _op, as_tensor
from .errors import ContractError, ValidationError

ANGLE_EPS = 1e-6


# ---- shape terms ------------------------------------------------------------

def loss_sdf(pred, true, delta: float) -> Tensor:
    """Mean absolute difference of truncated SDF values."""
    if delta <= 0:
        raise ValidationError("delta must be positive")
    true = np.clip(np.asarray(true, dtype=np.float64), -delta, delta)
    return ad.mean(ad.absolute(ad.clip(as_tensor(pred), -delta, delta) - true))


def loss_silhouette(soft, gt) -> Tensor:
    return ad.mean(ad.absolute(as_tensor(soft) - np.asarray(gt, dtype=np.float64)))


def loss_eikonal(grad) -> Tensor:
    """``mean((|grad f| - 1)^2)`` for spatial gradients stacked as (D, B)."""
    g = as_tensor(grad)
    return ad.mean((ad.norm(g, axis=0) - 1.0) ** 2)


def loss_latent(z, sigma: float) -> Tensor:
    """``|z|^2 / sigma^2`` summed over all entries."""
    z = as_tensor(z)
    return ad.tsum(z * z) * (1.0 / sigma ** 2)


# ---- point-set terms ----------------------------------------------------------

def _points(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValidationError("point sets must be non-empty (N, D) arrays")
    return x


def nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance and index of the nearest row of ``b`` for every row of ``a``."""
    dist, idx = cKDTree(b).query(a)
    return dist, idx


def chamfer(a, b, squared: bool = True) -> float:
    """Sum of per-direction mean nearest-neighbour (squared) distances."""
    a, b = _points(a), _points(b)
    da, _ = nearest(a, b)
    db, _ = nearest(b, a)
    if squared:
        return float(np.mean(da ** 2) + np.mean(db ** 2))
    return float(np.mean(da) + np.mean(db))


def chamfer_l2(a, b) -> float:
    """Unsquared chamfer distance, reported in the units of the inputs."""
    return chamfer(a, b, squared=False)


def loss_chamfer(a, b) -> Tensor:
    """Differentiable squared chamfer; correspondences are re-found each call."""
    ad_, bd = _points(a), _points(b)
    a, b = as_tensor(a), as_tensor(b)
    _, ia = nearest(ad_, bd)
    _, ib = nearest(bd, ad_)
    da = a - ad.take_rows(b, ia)
    db = b - ad.take_rows(a, ib)
    return ad.mean(ad.tsum(da * da, axis=1)) + ad.mean(ad.tsum(db * db, axis=1))


# ---- mesh regularisers --------------------------------------------------------

def edge_lengths(v, edges: np.ndarray) -> Tensor:
    v = as_tensor(v)
    d = ad.take_rows(v, edges[:, 0]) - ad.take_rows(v, edges[:, 1])
    return ad.norm(d, axis=1)


def loss_edge_length(edges: np.ndarray, base, deformed) -> Tensor:
    """Mean squared change of edge lengths."""
    ref = np.linalg.norm(_points(base)[edges[:, 0]] - _points(base)[edges[:, 1]], axis=1)
    return ad.mean((edge_lengths(deformed, edges) - ref) ** 2)


def uniform_laplacian(n: int, edges: np.ndarray) -> sparse.csr_matrix:
    """``L v = v - mean(1-ring)`` as a sparse matrix."""
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = sparse.diags(np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0))
    return (sparse.identity(n, format="csr") - inv @ adj).tocsr()


def sparse_apply(mat: sparse.spmatrix, x) -> Tensor:
    x = as_tensor(x)
    mt = mat.T.tocsr()
    return _op(mat @ x.data, (x,), lambda g: (mt @ g,))


def loss_laplacian(lap: sparse.spmatrix, deformed, base=None) -> Tensor:
    """Mean squared norm of uniform-Laplacian vectors, measured relative to
    the base mesh when one is given (zero for any flat base)."""
    lv = sparse_apply(lap, deformed)
    if base is not None:
        lv = lv - lap @ _points(base)
    return ad.mean(ad.tsum(lv * lv, axis=1))


def loss_map(chamfer_bd, z_d, phi, eps: float = 1e-8) -> Tensor:
    """``(chamfer(S_b, S_d) / |z_d| - phi)^2``."""
    z = as_tensor(z_d)
    length = ad.norm(z.reshape(-1), axis=0)
    if length.data < eps:
        length = Tensor(eps)
    return ((as_tensor(chamfer_bd) / length - phi) ** 2).sum()


def loss_boundary_length(contour: np.ndarray, base, deformed) -> Tensor:
    """Summed squared change of consecutive contour distances."""
    edges = np.stack([contour, np.roll(contour, -1)], axis=1)
    ref = np.linalg.norm(_points(base)[edges[:, 0]] - _points(base)[edges[:, 1]], axis=1)
    return ad.tsum((edge_lengths(deformed, edges) - ref) ** 2)


def corner_angles(corners: np.ndarray, v) -> Tensor:
    v = as_tensor(v)
    apex = ad.take_rows(v, corners[:, 0])
    e1 = ad.take_rows(v, corners[:, 1]) - apex
    e2 = ad.take_rows(v, corners[:, 2]) - apex
    return ad.arctan2(ad.norm(ad.cross(e1, e2), axis=1), ad.tsum(e1 * e2, axis=1))


def loss_face_angle(corners: np.ndarray, v, eps: float = ANGLE_EPS) -> Tensor:
    """``sum 1 / (theta + eps)`` over boundary corners (apex, a, b)."""
    if len(corners) == 0:
        return Tensor(0.0)
    return ad.tsum(1.0 / (corner_angles(corners, v) + eps))


def loss_anchor(z, anchor) -> Tensor:
    """Unsquared distance to the anchor latent."""
    diff = as_tensor(z) - np.asarray(anchor, dtype=np.float64)
    return ad.norm(diff.reshape(-1), axis=0)


def loss_skin_similarity(w_a, w_b) -> Tensor:
    return ad.mean((as_tensor(w_a) - as_tensor(w_b)) ** 2)


# ---- metrics ------------------------------------------------------------------

def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unit length, zero for isolated vertices)."""
    v = np.asarray(vertices, dtype=np.float64)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    fn = np.cross(b - a, c - a)  # length = 2 * area
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def metric_normal_consistency(gt_vertices, gt_faces, pred_vertices, pred_faces) -> float:
    """Mean cosine between each gt vertex normal and that of its closest
    predicted vertex."""
    ng = vertex_normals(gt_vertices, gt_faces)
    npred = vertex_normals(pred_vertices, pred_faces)
    _, idx = nearest(np.asarray(gt_vertices, float), np.asarray(pred_vertices, float))
    return float(np.mean(np.sum(ng * npred[idx], axis=1)))


def extent(points) -> float:
    """Largest bounding-box side."""
    p = _points(points)
    return float(np.max(p.max(axis=0) - p.min(axis=0)))


# ---- reports ------------------------------------------------------------------

@dataclass
class LossReport:
    terms: dict[str, float]
    weights: dict[str, float]
    total: float = field(init=False)

    def __post_init__(self):
        for name, value in self.terms.items():
            if not np.isfinite(value):
                from .errors import NumericalError
                raise NumericalError(f"loss term {name} is not finite")
        self.total = float(sum(self.weights[k] * v for k, v in self.terms.items()))

    def line(self) -> str:
        parts = " ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        return f"total={self.total:.6g} {parts}"


def weighted_total(terms: Mapping[str, Tensor], weights: Mapping[str, float]):
    """Weighted sum as a tensor plus the matching :class:`LossReport`."""
    total = None
    for name, term in terms.items():
        if name not in weights:
            raise ContractError(f"no weight for loss term {name!r}")
        piece = term * weights[name]
        total = piece if total is None else total + piece
    report = LossReport({k: float(v.data) for k, v in terms.items()},
                        {k: float(weights[k]) for k in terms})
    return total, report
