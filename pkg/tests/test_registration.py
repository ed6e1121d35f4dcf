import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nlf.base_shape import extract_base_mesh
from nlf.errors import DegenerateError, ValidationError
from nlf.registration import (arap_register, cpd_register, keypoint_matrix, rigid_align,
                              rotation_angle_deg, sample_contour_keypoints)
from nlf.sdf import Mask2D
from nlf.synthetic import Deformation, generate_synthetic_dataset


@pytest.fixture(scope="module")
def leaf():
    shapes, _ = generate_synthetic_dataset(1, 3)
    return extract_base_mesh(shapes.masks[0])


def lopsided(n=400, seed=0):
    """A planar blob with no mirror symmetry, longest along x."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (4 * n, 2)) * [2.0, 1.0]
    keep = (pts[:, 0] / 2) ** 2 + pts[:, 1] ** 2 < 1
    keep &= ~((pts[:, 0] < -0.5) & (pts[:, 1] > 0.2))
    pts = pts[keep][:n]
    return np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)


def test_rigid_align_frame_properties():
    pts = lopsided()
    pose = rigid_align(pts)
    r = pose.rotation
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
    aligned = pose.apply(pts)
    # a cloud already in its leaf frame comes back with the identity rotation
    assert rotation_angle_deg(rigid_align(aligned).rotation) < 2.0
    assert np.ptp(aligned[:, 0]) == pytest.approx(1.0)
    np.testing.assert_allclose(aligned.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(pose.inverse(aligned), pts, atol=1e-12)


def test_rigid_align_recovers_rotations():
    pts = lopsided()
    ref = rigid_align(pts).rotation
    rng = np.random.default_rng(1)
    for _ in range(10):
        rot = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
        rec = rigid_align(pts @ rot.T).rotation
        assert rotation_angle_deg(rec @ rot @ ref.T) < 2.0


def test_rigid_align_folded_leaf_keeps_midrib(leaf):
    v = leaf.vertices
    fold = Deformation("fold", math.radians(60), float(v[:, 1].mean()), float(v[:, 0].mean()))
    pose = rigid_align(fold.apply(v))
    # the fold hinge is the midrib, which stays the leading axis
    assert math.degrees(math.acos(abs(pose.rotation[0, 0]))) < 5.0


def test_rigid_align_errors():
    line = np.stack([np.linspace(0, 1, 20)] * 3, axis=1)
    with pytest.raises(DegenerateError):
        rigid_align(line)
    with pytest.raises(ValidationError):
        rigid_align(np.zeros((5, 3)))


def test_contour_keypoints():
    t = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    circle = np.stack([np.cos(t + 1.0), np.sin(t + 1.0)], axis=1)
    full = sample_contour_keypoints(circle, 200)
    assert len(full) == 200 and full[0, 0] == circle[:, 0].max()
    two = sample_contour_keypoints(circle, 2)
    np.testing.assert_allclose(two[1], -two[0], atol=1e-3)
    pts = sample_contour_keypoints(circle, 37)
    gaps = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    assert gaps.std() < 2 * np.pi / 200


def test_keypoint_matrix_matches_sampler(leaf):
    km = keypoint_matrix(leaf.contour, leaf.vertices, 25)
    ref = sample_contour_keypoints(leaf.vertices[leaf.contour], 25)
    np.testing.assert_allclose(km @ leaf.vertices, ref, atol=1e-12)


def test_arap_translation_is_exact(leaf):
    v = leaf.vertices
    km = keypoint_matrix(leaf.contour, v, 40)
    shift = np.array([0.1, -0.2, 0.3])
    res = arap_register(v, leaf.edges(), km, km @ v + shift, iters=10)
    np.testing.assert_allclose(res.vertices - v, np.broadcast_to(shift, v.shape), atol=1e-5)
    assert res.energies[-1] < 1e-12
    assert np.all(np.diff(res.energies) <= 1e-12)


def test_arap_bent_leaf(leaf):
    v = leaf.vertices
    fold = Deformation("fold", math.radians(30), float(v[:, 1].mean()), float(v[:, 0].mean()))
    target = fold.apply(v)
    km = keypoint_matrix(leaf.contour, v, 60)
    res = arap_register(v, leaf.edges(), km, km @ target, cloud=target, w_cloud=1.0, iters=50)
    length = np.ptp(v[:, 0])
    assert np.linalg.norm(res.vertices - target, axis=1).max() < 0.02 * length
    assert np.all(np.diff(res.energies) <= 1e-12 * res.energies[0])


def test_cpd_identity_and_warp(leaf):
    src = leaf.vertices[::3]
    same = cpd_register(src, src)
    assert same.iterations <= 2
    assert np.abs(same.displacement).max() < 1e-9
    ext = np.ptp(src, axis=0).max()
    warp = src.copy()
    warp[:, 2] += 0.05 * ext * np.sin(2 * np.pi * src[:, 0] / ext)
    res = cpd_register(src, warp)
    assert np.linalg.norm(res.moved - warp, axis=1).mean() < 0.01 * ext
    assert np.all(np.diff(res.objectives) <= 1e-9 * np.abs(res.objectives[:-1]).clip(1.0))


def test_cpd_outliers_get_little_mass(leaf):
    src = leaf.vertices[::4]
    rng = np.random.default_rng(2)
    outliers = rng.uniform(src.min(0) - 0.3, src.max(0) + 0.3, (len(src) // 10, 3))
    outliers[:, 2] = rng.uniform(0.3, 0.6, len(outliers))
    res = cpd_register(src, np.vstack([src, outliers]))
    mass = res.posterior.sum(axis=0)[len(src):]
    assert np.all(mass < 0.5)


def test_cpd_validation():
    with pytest.raises(ValidationError):
        cpd_register(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        cpd_register(np.zeros((3, 3)), np.zeros((3, 2)))


def test_cpd_motion_field_interpolates(leaf):
    src = leaf.vertices[::3]
    ext = np.ptp(src, axis=0).max()
    warp = src.copy()
    warp[:, 2] += 0.05 * ext * np.sin(2 * np.pi * src[:, 0] / ext)
    res = cpd_register(src, warp)
    np.testing.assert_allclose(res.transform(src), res.moved, atol=1e-12)
    full = leaf.vertices
    truth = full[:, 2] + 0.05 * ext * np.sin(2 * np.pi * full[:, 0] / ext)
    assert np.abs(res.transform(full)[:, 2] - truth).mean() < 0.01 * ext


def test_register_pair_improves_chamfer():
    from nlf.registration import register_pair
    shapes, pairs = generate_synthetic_dataset(3, 11)
    for mask, pair in zip(shapes.masks, pairs.pairs):
        mesh = extract_base_mesh(mask)
        rot = Rotation.from_euler("xyz", [20, -10, 35], degrees=True).as_matrix()
        observed = pair.cloud @ rot.T * 1.7 + [3.0, -1.0, 2.0]
        reg = register_pair(mesh.vertices, mesh.edges(), mesh.contour, observed)
        assert reg.chamfer_after <= reg.chamfer_before
        assert reg.target_index.shape == (len(mesh.vertices),)
        assert np.all((reg.confidence >= 0) & (reg.confidence <= 1))
