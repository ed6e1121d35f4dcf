import numpy as np
import pytest

from nlf import losses as L
from nlf.config import TrainConfig
from nlf.deformation import CONTROL, PHI, init_control_points
from nlf.engine import Tensor
from nlf.errors import ValidationError
from nlf.sdf import Mask2D
from nlf.synthetic import ShapeDataset, generate_synthetic_dataset
from nlf.training import (TrainingDiverged, pair_chamfers, select_similar_shapes,
                          train_deformation_stage1, train_deformation_stage2, train_shape_space)

TINY = TrainConfig(shape_hidden=16, samples_per_leaf=64, deform_hidden=16, latent_dim_s=8,
                   latent_dim_d=8, n_control=16, epochs=15, lr=3e-3, stage2_epochs=3, similar_m=1)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic_dataset(3, 4, resolution=32)


@pytest.fixture(scope="module")
def space(data):
    return train_shape_space(data[0], TINY)


@pytest.fixture(scope="module")
def stage1(data, space):
    return train_deformation_stage1(data[1], data[0], space[0], TINY)


def test_shape_training_lowers_loss_and_fills_latents(space, data):
    sp, hist = space
    assert hist.totals[-1] < hist.totals[0]
    assert sp.latents.shape == (3, 8) and sp.ids == data[0].ids
    assert "latents.shape" not in sp.params


def test_shape_training_is_deterministic(data, space):
    again, _ = train_shape_space(data[0], TINY)
    np.testing.assert_array_equal(again.latents, space[0].latents)
    for n in again.params:
        np.testing.assert_array_equal(again.params[n], space[0].params[n])


def test_empty_dataset_rejected():
    with pytest.raises(ValidationError):
        train_shape_space(ShapeDataset([], []), TINY)


def test_nonfinite_loss_raises_with_last_state(data, monkeypatch):
    monkeypatch.setattr(L, "loss_eikonal", lambda g: Tensor(float("nan"), check=False))
    with pytest.raises(TrainingDiverged) as info:
        train_shape_space(data[0], TINY.replace(epochs=2))
    assert info.value.last_good is not None


def test_stage1_leaves_shape_space_untouched(data, space):
    sp = space[0]
    before = {n: sp.params[n].copy() for n in sp.params}
    lat = sp.latents.copy()
    train_deformation_stage1(data[1], data[0], sp, TINY.replace(epochs=2))
    for n in sp.params:
        np.testing.assert_array_equal(sp.params[n], before[n])
    np.testing.assert_array_equal(sp.latents, lat)


def test_stage1_fits_pairs(stage1, data):
    model, hist = stage1
    assert hist.totals[-1] < hist.totals[0]
    assert model.latents.shape == (3, 8)
    assert model.pair_ids == [p.pair_id for p in data[1].pairs]
    assert "latents.deform" not in model.params
    assert not np.allclose(model.control, init_control_points(16))


def test_stage1_fixed_control(data, space):
    model, _ = train_deformation_stage1(data[1], data[0], space[0],
                                        TINY.replace(epochs=2, optimize_control=False))
    np.testing.assert_array_equal(model.control, init_control_points(16))


def test_stage1_without_map_term(data, space):
    _, hist = train_deformation_stage1(data[1], data[0], space[0], TINY.replace(epochs=1, w_map=0.0))
    assert "map" not in hist.reports[0].terms


def test_stage2_updates_decoders_only(stage1, data, space):
    model = stage1[0]
    out, hist = train_deformation_stage2(model, data[1], data[0], space[0], TINY)
    np.testing.assert_array_equal(out.latents, model.latents)
    np.testing.assert_array_equal(out.params[CONTROL], model.params[CONTROL])
    np.testing.assert_array_equal(out.params[PHI], model.params[PHI])
    changed = [n for n in model.params if not np.array_equal(out.params[n], model.params[n])]
    assert changed and all(n.startswith(("skin.", "xform.")) for n in changed)
    assert {"skin", "bound", "ang"} <= set(hist.reports[0].terms)


def test_stage2_rejects_other_pairs(stage1, data, space):
    _, other = generate_synthetic_dataset(2, 9, resolution=32)
    with pytest.raises(ValidationError):
        train_deformation_stage2(stage1[0], other, data[0], space[0], TINY)


def test_pair_chamfers_finite(stage1, data, space):
    ch = pair_chamfers(stage1[0], data[1], data[0], space[0])
    assert ch.shape == (3,) and np.isfinite(ch).all()


def _square(size, lo, hi):
    bits = np.zeros((size, size), dtype=bool)
    bits[lo:hi, lo:hi] = True
    return Mask2D(bits, 1.0 / size)


def test_select_similar_shapes_ordering():
    pool = ShapeDataset([_square(16, 4, 12), _square(16, 3, 13), _square(16, 4, 12), _square(16, 0, 2)],
                        ["d", "c", "b", "a"])
    q = _square(16, 4, 12).bits
    assert select_similar_shapes(q, pool, 2) == ["b", "d"]         # ties keep id order
    assert select_similar_shapes(q, pool, 2, exclude={"b"}) == ["d", "c"]
    assert select_similar_shapes(q, pool, 10)[-1] == "a"
    with pytest.raises(ValidationError):
        select_similar_shapes(q, pool, 0)
