"""Alignment chain for building paired data: leaf-frame rigid alignment,
contour keypoints, as-rigid-as-possible registration and coherent point
drift."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, solve
from scipy.sparse.linalg import factorized
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.special import logsumexp

from .errors import DegenerateError, DimensionError, NumericalError, ValidationError

log = logging.getLogger(__name__)


# ---- rigid alignment ------------------------------------------------------------

@dataclass
class RigidPose:
    """``p -> scale * rotation @ (p - centre)``; rows of ``rotation`` are the
    leaf axes (midrib x, secondary vein y, normal z)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return ((p - self.translation) / self.scale) @ self.rotation


def _hull_area(pts2: np.ndarray) -> float:
    try:
        return float(ConvexHull(pts2).volume)
    except QhullError:
        return 0.0


def _signed(axis: np.ndarray, centred: np.ndarray) -> np.ndarray:
    """Flip ``axis`` so the third moment along it is non-negative."""
    return axis if np.sum((centred @ axis) ** 3) >= 0 else -axis


def rigid_align(points, step_deg: float = 1.0) -> RigidPose:
    """Leaf frame of a (possibly deformed) cloud.

    x is the leading principal direction; y is the direction perpendicular
    to x along which the silhouette has the least area (viewed down y the
    blade is seen edge-on), searched in ``step_deg`` increments; z = x × y.
    Axis signs follow the third moments so the frame is unique for
    non-symmetric leaves; the scale maps the x-extent to 1.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 10:
        raise ValidationError("rigid alignment needs at least 10 3D points")
    centre = p.mean(axis=0)
    q = p - centre
    evals, evecs = np.linalg.eigh(q.T @ q / len(q))
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateError("points are collinear; leaf frame undefined")
    x = _signed(evecs[:, 2], q)
    e1, e2 = evecs[:, 1], evecs[:, 0]
    best, best_area = e1, math.inf
    for deg in np.arange(0.0, 180.0, step_deg):
        t = math.radians(deg)
        y = math.cos(t) * e1 + math.sin(t) * e2
        view_plane = np.stack([q @ x, q @ np.cross(x, y)], axis=1)
        area = _hull_area(view_plane)
        if area < best_area - 1e-15:
            best, best_area = y, area
    y = _signed(best, q)
    z = np.cross(x, y)
    rot = np.stack([x, y, z])
    xs = q @ x
    scale = 1.0 / (xs.max() - xs.min())
    return RigidPose(rot, -scale * rot @ centre, float(scale))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Angle of the rotation matrix ``r``."""
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(c))


# ---- contour keypoints ------------------------------------------------------------

def sample_contour_keypoints(contour_points, n: int) -> np.ndarray:
    """``n`` points at equal arc length along a closed polyline, starting at
    the vertex with the largest x (the leaf tip).

    When ``n`` equals the number of vertices the polyline is already the
    full-resolution sampling and its vertices are returned (tip first).
    """
    pts = np.asarray(contour_points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValidationError("contour needs at least two points")
    if n < 1:
        raise ValidationError("n must be positive")
    pts = np.roll(pts, -int(np.argmax(pts[:, 0])), axis=0)
    if n == len(pts):
        return pts.copy()
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n) / n
    return np.stack([np.interp(targets, arc, closed[:, d]) for d in range(pts.shape[1])], axis=1)


def keypoint_matrix(contour_points_idx: np.ndarray, vertices: np.ndarray, n: int) -> sparse.csr_matrix:
    """Sparse (n, N) interpolation matrix reproducing
    :func:`sample_contour_keypoints` on the contour of a mesh."""
    idx = np.asarray(contour_points_idx)
    pts = vertices[idx]
    start = int(np.argmax(pts[:, 0]))
    idx = np.roll(idx, -start)
    pts = vertices[idx]
    if n == len(idx):
        return sparse.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, len(vertices)))
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n) / n
    k = np.clip(np.searchsorted(arc, targets, side="right") - 1, 0, len(idx) - 1)
    a = (targets - arc[k]) / np.where(seg[k] > 0, seg[k], 1.0)
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([idx[k], idx[(k + 1) % len(idx)]])
    return sparse.csr_matrix((np.concatenate([1 - a, a]), (rows, cols)), shape=(n, len(vertices)))


# ---- ARAP ------------------------------------------------------------------------------

@dataclass
class ArapResult:
    vertices: np.ndarray
    energies: list[float]
    rotations: np.ndarray


def _directed(edges: np.ndarray) -> np.ndarray:
    return np.concatenate([edges, edges[:, ::-1]])


def _fit_rotations(rest: np.ndarray, cur: np.ndarray, d_edges: np.ndarray, n: int) -> np.ndarray:
    """Per-vertex rotation best mapping rest ring edges to current ones."""
    e0 = rest[d_edges[:, 0]] - rest[d_edges[:, 1]]
    e1 = cur[d_edges[:, 0]] - cur[d_edges[:, 1]]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, d_edges[:, 0], e0[:, :, None] * e1[:, None, :])
    try:
        return _proper(*np.linalg.svd(cov)[::2])
    except LinAlgError:
        log.warning("batched SVD failed; solving rings one at a time")
    rots = np.tile(np.eye(3), (n, 1, 1))
    for i in range(n):
        try:
            rots[i] = _proper(*np.linalg.svd(cov[i:i + 1])[::2])[0]
        except LinAlgError:
            pass  # identity for a degenerate ring
    return rots


def _proper(u: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """``V U^T`` per batch entry, with the reflection case repaired."""
    r = np.einsum("nji,nkj->nik", vt, u)
    flip = np.linalg.det(r) < 0
    if np.any(flip):
        vt = vt.copy()
        vt[flip, 2, :] *= -1
        r[flip] = np.einsum("nji,nkj->nik", vt[flip], u[flip])
    return r


def arap_energy(rest, cur, rots, d_edges, key_mat, key_targets, w_key,
                cloud_tree=None, cloud=None, w_cloud=0.0) -> float:
    e0 = rest[d_edges[:, 0]] - rest[d_edges[:, 1]]
    e1 = cur[d_edges[:, 0]] - cur[d_edges[:, 1]]
    rigid = e1 - np.einsum("nij,nj->ni", rots[d_edges[:, 0]], e0)
    energy = float(np.sum(rigid ** 2))
    energy += w_key * float(np.sum((key_mat @ cur - key_targets) ** 2))
    if cloud_tree is not None and w_cloud > 0:
        dist, _ = cloud_tree.query(cur)
        energy += w_cloud * float(np.sum(dist ** 2))
    return energy


def arap_register(vertices, edges, key_mat, key_targets, cloud=None, iters: int = 50,
                  w_key: float = 10.0, w_cloud: float = 0.0, tol: float = 1e-12) -> ArapResult:
    """As-rigid-as-possible deformation of a mesh towards keypoint targets
    and, optionally, a target cloud (nearest-point data term).

    Alternates closest points, per-vertex rotations (SVD of ring-edge
    covariances) and a sparse linear solve for positions; each sub-step
    minimises the energy in its own block, so the recorded energy never
    increases.
    """
    rest = np.asarray(vertices, dtype=np.float64)
    n = len(rest)
    key_mat = sparse.csr_matrix(key_mat)
    key_targets = np.asarray(key_targets, dtype=np.float64)
    if key_mat.shape != (len(key_targets), n):
        raise DimensionError("keypoint matrix and targets disagree")
    d_edges = _directed(np.asarray(edges))
    m = len(d_edges)
    diff = sparse.csr_matrix((np.concatenate([np.ones(m), -np.ones(m)]),
                              (np.concatenate([np.arange(m)] * 2),
                               np.concatenate([d_edges[:, 0], d_edges[:, 1]]))), shape=(m, n))
    system = (diff.T @ diff + w_key * (key_mat.T @ key_mat)).tocsc()
    tree = None
    if cloud is not None and w_cloud > 0:
        cloud = np.asarray(cloud, dtype=np.float64)
        tree = cKDTree(cloud)
        system = system + w_cloud * sparse.identity(n, format="csc")
    try:
        solve_sys = factorized(system.tocsc())
    except RuntimeError as exc:
        raise NumericalError(f"ARAP system is singular: {exc}") from exc
    cur = rest.copy()
    rots = np.tile(np.eye(3), (n, 1, 1))
    energies = [arap_energy(rest, cur, rots, d_edges, key_mat, key_targets, w_key, tree, cloud, w_cloud)]
    e0 = rest[d_edges[:, 0]] - rest[d_edges[:, 1]]
    for _ in range(iters):
        rots = _fit_rotations(rest, cur, d_edges, n)
        rhs = diff.T @ np.einsum("nij,nj->ni", rots[d_edges[:, 0]], e0)
        rhs = rhs + w_key * (key_mat.T @ key_targets)
        if tree is not None:
            _, nn = tree.query(cur)
            rhs = rhs + w_cloud * cloud[nn]
        cur = np.stack([solve_sys(rhs[:, d]) for d in range(3)], axis=1)
        energies.append(arap_energy(rest, cur, rots, d_edges, key_mat, key_targets, w_key,
                                    tree, cloud, w_cloud))
        if energies[-2] - energies[-1] <= tol * max(energies[-2], 1.0):
            break
    return ArapResult(cur, energies, rots)


# ---- coherent point drift ------------------------------------------------------------------

@dataclass
class CpdResult:
    moved: np.ndarray            # source points after the fitted motion
    displacement: np.ndarray     # moved - source
    target_index: np.ndarray     # most probable target point per source point
    confidence: np.ndarray       # posterior of that correspondence
    posterior: np.ndarray        # (M, N) responsibilities
    objectives: list[float]      # penalised negative log-likelihood per iteration
    sigma2: float
    iterations: int
    weights: np.ndarray | None = None   # kernel weights W in the normalised frame
    frame: tuple | None = None          # (source points, mean, scale, beta)

    def transform(self, points) -> np.ndarray:
        """Evaluate the fitted smooth motion field at arbitrary points."""
        y, mu, scale, beta = self.frame
        p = (np.asarray(points, dtype=np.float64) - mu) / scale
        d2 = np.sum((p[:, None, :] - y[None, :, :]) ** 2, axis=2)
        return (p + np.exp(-d2 / (2.0 * beta * beta)) @ self.weights) * scale + mu


def _gauss_kernel(y: np.ndarray, beta: float) -> np.ndarray:
    d2 = np.sum((y[:, None, :] - y[None, :, :]) ** 2, axis=2)
    return np.exp(-d2 / (2.0 * beta * beta))


def _e_step(x, t, sigma2, omega):
    """Responsibilities (M, N) and the negative log-likelihood."""
    m, d = t.shape
    n = len(x)
    d2 = np.sum((t[:, None, :] - x[None, :, :]) ** 2, axis=2)
    log_g = -d2 / (2 * sigma2) - 0.5 * d * math.log(2 * math.pi * sigma2) + math.log((1 - omega) / m)
    log_u = math.log(omega / n) if omega > 0 else -np.inf
    log_px = np.logaddexp(logsumexp(log_g, axis=0), log_u)
    p = np.exp(log_g - log_px[None, :])
    return p, float(-np.sum(log_px))


def cpd_register(source, target, beta: float = 2.0, lam: float = 3.0, omega: float = 0.1,
                 max_iters: int = 150, tol: float = 1e-6) -> CpdResult:
    """Non-rigid coherent point drift moving ``source`` onto ``target``.

    Both sets are expressed in the source's normalised frame (zero mean,
    unit RMS radius) so ``beta`` and ``lam`` are scale free.  The variance
    starts from the mean squared nearest-neighbour residual, so an already
    aligned pair stops immediately.
    """
    y0 = np.asarray(source, dtype=np.float64)
    x0 = np.asarray(target, dtype=np.float64)
    if y0.ndim != 2 or x0.ndim != 2 or len(y0) == 0 or len(x0) == 0 or y0.shape[1] != x0.shape[1]:
        raise ValidationError("CPD needs two non-empty point sets of equal dimension")
    if not 0 <= omega < 1:
        raise ValidationError("omega must lie in [0, 1)")
    mu = y0.mean(axis=0)
    scale = math.sqrt(np.mean(np.sum((y0 - mu) ** 2, axis=1))) or 1.0
    y, x = (y0 - mu) / scale, (x0 - mu) / scale
    m, d = y.shape
    g = _gauss_kernel(y, beta)
    floor = 1e-10
    nn, _ = cKDTree(y).query(x)
    sigma2 = max(float(np.mean(nn ** 2)) / d, floor)
    w = np.zeros_like(y)
    t = y.copy()
    p, nll = _e_step(x, t, sigma2, omega)
    objectives = [nll]
    it = 0
    for it in range(1, max_iters + 1):
        p1 = p.sum(axis=1)
        pt1 = p.sum(axis=0)
        px = p @ x
        lam_i = lam
        for attempt in range(2):
            a = p1[:, None] * g + lam_i * sigma2 * np.eye(m)
            try:
                w = solve(a, px - p1[:, None] * y, assume_a="gen")
                if not np.isfinite(w).all():
                    raise LinAlgError("non-finite solution")
                break
            except (LinAlgError, ValueError) as exc:
                if attempt == 1:
                    raise NumericalError(f"CPD M-step is singular: {exc}") from exc
                lam_i *= 10.0
                log.warning("singular CPD M-step; retrying with lambda=%g", lam_i)
        t = y + g @ w
        np_ = float(p1.sum())
        sigma2 = (np.sum(pt1 * np.sum(x * x, axis=1)) - 2 * np.sum(px * t)
                  + np.sum(p1 * np.sum(t * t, axis=1))) / (np_ * d)
        sigma2 = max(float(sigma2), floor)
        p, nll = _e_step(x, t, sigma2, omega)
        objectives.append(nll + 0.5 * lam * float(np.sum(w * (g @ w))))
        if abs(objectives[-2] - objectives[-1]) <= tol * max(abs(objectives[-1]), 1.0):
            break
    moved = t * scale + mu
    best = np.argmax(p, axis=1)
    conf = p[np.arange(m), best]
    return CpdResult(moved, moved - y0, best, conf, p, objectives, sigma2 * scale ** 2, it,
                     w, (y, mu, scale, beta))


# ---- full chain ---------------------------------------------------------------------------------

@dataclass
class PairRegistration:
    aligned: np.ndarray          # observed cloud in the base frame
    warped: np.ndarray           # base vertices after ARAP + CPD
    target_index: np.ndarray
    confidence: np.ndarray
    chamfer_before: float
    chamfer_after: float


def _chamfer(a, b) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def register_pair(base_vertices, edges, contour, cloud, n_keypoints: int = 40, beta: float = 2.0,
                  lam: float = 3.0, omega: float = 0.1, cpd_points: int = 400,
                  step_deg: float = 1.0) -> PairRegistration:
    """rigid frame -> contour-keypoint ARAP -> CPD, returning dense
    base-vertex-to-cloud correspondences."""
    base = np.asarray(base_vertices, dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64)
    pose_b = rigid_align(base, step_deg)
    pose_c = rigid_align(cloud, step_deg)
    aligned = pose_b.inverse(pose_c.apply(cloud))
    before = _chamfer(base, aligned)
    km = keypoint_matrix(contour, base, min(n_keypoints, len(contour)))
    tree = cKDTree(aligned)
    _, nearest_kp = tree.query(km @ base)
    arap = arap_register(base, edges, km, aligned[nearest_kp], cloud=aligned, w_cloud=0.1, iters=30)
    step = max(1, len(base) // cpd_points)
    cpd = cpd_register(arap.vertices[::step], aligned[::max(1, len(aligned) // cpd_points)],
                       beta, lam, omega)
    warped = cpd.transform(arap.vertices)
    dist, idx = tree.query(warped)
    conf = np.exp(-dist ** 2 / (2.0 * max(cpd.sigma2, 1e-12)))
    return PairRegistration(aligned, warped, idx, conf, before, _chamfer(warped, aligned))
