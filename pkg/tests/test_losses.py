import math

import numpy as np
import pytest

from nlf import losses as L
from nlf.base_shape import extract_base_mesh
from nlf.engine import Tape, Tensor, gradient
from nlf.errors import NumericalError, ValidationError
from nlf.sdf import Mask2D

from helpers import brute_force_nn_sq, central_difference, max_relative_error


def grid_mesh(n=5):
    bits = np.ones((n, n), bool)
    return extract_base_mesh(Mask2D(bits, 1.0))


def test_sdf_and_silhouette_examples():
    assert L.loss_sdf(np.array([0.5]), [-0.5], 0.01).data == pytest.approx(0.02)
    d = np.random.default_rng(0).normal(0, 0.02, 50)
    assert L.loss_sdf(d, d, 0.01).data == 0.0
    pred = np.random.default_rng(1).normal(0, 0.02, 50)
    loop = np.mean([abs(min(max(p, -0.01), 0.01) - min(max(t, -0.01), 0.01)) for p, t in zip(pred, d)])
    assert L.loss_sdf(pred, d, 0.01).data == pytest.approx(loop, abs=1e-15)
    gt = np.array([1.0, 0, 1, 0])
    assert L.loss_silhouette(gt, gt).data == 0.0
    assert L.loss_silhouette(1 - gt, gt).data == 1.0
    assert L.loss_silhouette([1.0, 1, 0, 0], gt).data == 0.5
    with pytest.raises(ValidationError):
        L.loss_sdf(pred, d, 0.0)


def test_eikonal_and_latent_examples():
    grad_unit = np.vstack([np.ones(10), np.zeros(10)])
    assert L.loss_eikonal(grad_unit).data == 0.0
    assert L.loss_eikonal(2 * grad_unit).data == pytest.approx(1.0)
    assert L.loss_latent(np.zeros(4), 10).data == 0.0
    assert L.loss_latent(np.full(4, 5.0), 10).data == pytest.approx(1.0)
    z0 = np.random.default_rng(2).normal(size=5)
    tape = Tape()
    g = gradient(tape, L.loss_latent(tape.watch(z0, "z"), 10))["z"]
    np.testing.assert_allclose(g, 2 * z0 / 100, rtol=1e-12)


def test_chamfer_examples_and_oracle():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0, 0]])
    assert L.chamfer(a, b) == pytest.approx(2.0)
    assert L.chamfer(a, a) == 0.0
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.normal(size=(rng.integers(1, 60), 3)), rng.normal(size=(rng.integers(1, 60), 3))
        ref = brute_force_nn_sq(a, b).mean() + brute_force_nn_sq(b, a).mean()
        assert L.chamfer(a, b) == pytest.approx(ref, rel=1e-12)
        assert L.chamfer(a, b) == pytest.approx(L.chamfer(b, a), rel=1e-12)
        unsq = np.sqrt(brute_force_nn_sq(a, b)).mean() + np.sqrt(brute_force_nn_sq(b, a)).mean()
        assert L.chamfer_l2(a, b) == pytest.approx(unsq, rel=1e-12)
        assert L.loss_chamfer(a, b).data == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValidationError):
        L.chamfer(np.zeros((0, 3)), b)


def test_edge_length_examples():
    mesh = grid_mesh()
    e = mesh.edges()
    v = mesh.vertices
    assert L.loss_edge_length(e, v, v).data == 0.0
    axis = e[np.isclose(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1), 1.0)]
    assert L.loss_edge_length(axis, v, 2 * v).data == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    moved = v + rng.normal(0, 0.1, v.shape)
    loop = np.mean([(np.linalg.norm(moved[i] - moved[j]) - np.linalg.norm(v[i] - v[j])) ** 2
                    for i, j in e])
    assert L.loss_edge_length(e, v, moved).data == pytest.approx(loop, rel=1e-12)


def test_laplacian_examples():
    mesh = grid_mesh(7)
    lap = L.uniform_laplacian(len(mesh.vertices), mesh.edges())
    v = mesh.vertices
    interior = [i for i, nb in enumerate(mesh.neighbors()) if len(nb) == 6]
    lv = lap @ v
    np.testing.assert_allclose(lv[interior], 0.0, atol=1e-12)
    assert L.loss_laplacian(lap, v + [3.0, -1.0, 2.0]).data == pytest.approx(L.loss_laplacian(lap, v).data)
    # lift one interior vertex: base-relative loss is h^2 (1 + 1/deg summed over its ring) / N
    i, h = interior[len(interior) // 2], 0.1
    lifted = v.copy()
    lifted[i, 2] = h
    ring = mesh.neighbors()[i]
    expected = h ** 2 * (1 + sum(1 / len(mesh.neighbors()[j]) ** 2 for j in ring)) / len(v)
    assert L.loss_laplacian(lap, lifted, v).data == pytest.approx(expected, rel=1e-12)
    assert L.loss_laplacian(lap, v, v).data == 0.0


def test_map_boundary_angle_anchor_examples():
    assert L.loss_map(Tensor(2.0), np.array([1.0, 0.0]), Tensor(2.0)).data == 0.0
    assert L.loss_map(Tensor(0.0), np.array([0.3, 0.4]), Tensor(0.0)).data == 0.0
    assert np.isfinite(L.loss_map(Tensor(0.0), np.zeros(3), Tensor(1.5)).data)
    contour = np.arange(4)
    sq = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    rot = sq @ np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]).T + [3, 2, 1]
    assert L.loss_boundary_length(contour, sq, rot).data == pytest.approx(0.0, abs=1e-24)
    stretched = sq.copy()
    stretched[1:3, 0] = 2.0   # edge 0-1 and 2-3 stretch from 1 to 2
    assert L.loss_boundary_length(np.array([0, 1, 2, 3]), sq, stretched).data == pytest.approx(2.0)
    eq = np.array([[0.0, 0, 0], [1, 0, 0], [0.5, math.sqrt(3) / 2, 0]])
    assert L.loss_face_angle(np.array([[0, 1, 2]]), eq).data == pytest.approx(3 / math.pi, rel=1e-5)
    assert L.loss_face_angle(np.array([[0, 1, 3]]), sq).data == pytest.approx(2 / math.pi, rel=1e-5)
    flat = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert L.loss_face_angle(np.array([[0, 1, 2]]), flat).data == pytest.approx(1e6)
    z = np.array([1.0, 2.0])
    assert L.loss_anchor(z, z).data == 0.0
    assert L.loss_anchor(z, z + [0, 1]).data == pytest.approx(1.0)
    a, b = np.random.default_rng(5).normal(size=(2, 4))
    assert L.loss_anchor(a, b).data <= L.loss_anchor(a, 0 * a).data + L.loss_anchor(0 * a, b).data


def test_normal_consistency_examples():
    mesh = grid_mesh(6)
    v, f = mesh.vertices, mesh.faces
    assert L.metric_normal_consistency(v, f, v, f) == pytest.approx(1.0)
    assert L.metric_normal_consistency(v, f, v, f[:, ::-1]) == pytest.approx(-1.0)
    tilt = v.copy()
    tilt[:, 2] = tilt[:, 0]
    assert L.metric_normal_consistency(v, f, tilt, f) == pytest.approx(math.cos(math.pi / 4))


def test_report_totals_and_nan():
    report = L.LossReport({"a": 2.0, "b": 3.0}, {"a": 0.5, "b": 2.0})
    assert report.total == pytest.approx(7.0, abs=1e-9)
    with pytest.raises(NumericalError):
        L.LossReport({"a": float("nan")}, {"a": 1.0})


def _check(fn, x0):
    tape = Tape()
    g = gradient(tape, fn(tape.watch(x0, "x")))["x"]
    fd = central_difference(lambda x: float(fn(x).data), x0, 1e-6)
    return max_relative_error(g, fd, floor=1e-6)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    mesh = grid_mesh(4)
    v, e = mesh.vertices, mesh.edges()
    lap = L.uniform_laplacian(len(v), e)
    moved = v + rng.normal(0, 0.1, v.shape)
    cloud = rng.normal(0.5, 0.5, (20, 3))
    corners = mesh.boundary_corners()
    checks = {
        "sdf": (lambda x: L.loss_sdf(x, rng_fixed_sdf, 0.05), rng.normal(0, 0.04, 30)),
        "sil": (lambda x: L.loss_silhouette(x, (rng_fixed_sdf > 0) * 1.0), rng.uniform(0.1, 0.9, 30)),
        "eik": (lambda x: L.loss_eikonal(x), rng.normal(size=(2, 15))),
        "cham": (lambda x: L.loss_chamfer(x, cloud), moved),
        "leng": (lambda x: L.loss_edge_length(e, v, x), moved),
        "lap": (lambda x: L.loss_laplacian(lap, x, v), moved),
        "map": (lambda x: L.loss_map(L.loss_chamfer(v, moved), x, Tensor(0.3)), rng.normal(size=4)),
        "bound": (lambda x: L.loss_boundary_length(mesh.contour, v, x), moved),
        "ang": (lambda x: L.loss_face_angle(corners, x), moved),
        "anc": (lambda x: L.loss_anchor(x, np.zeros(4)), rng.normal(size=4)),
        "skin": (lambda x: L.loss_skin_similarity(x, np.full((5, 3), 1 / 3)), rng.uniform(0, 1, (5, 3))),
    }
    for name, (fn, x0) in checks.items():
        assert _check(fn, x0) < 1e-4, name


rng_fixed_sdf = np.random.default_rng(10).normal(0, 0.04, 30)
