import math

import numpy as np
import pytest

from nlf.engine import (MlpSpec, ParamSet, Tape, Tensor, ad, adam_update, conv3d, forward_mlp,
                        geometric_init, gradient, init_mlp, positional_encode,
                        positional_encode_jacobian, step_decay)
from nlf.errors import ContractError, DimensionError, ValidationError

from helpers import central_difference, max_relative_error


def test_tensor_rejects_non_finite():
    with pytest.raises(ValidationError):
        Tensor([1.0, np.nan])
    with pytest.raises(ValidationError):
        Tensor([np.inf])


def test_sum_of_squares_gradient():
    tape = Tape()
    w = tape.watch([1.0, 2.0], "w")
    loss = (w * w).sum()
    g = gradient(tape, loss)
    np.testing.assert_allclose(g["w"], [2.0, 4.0])


def test_sigmoid_gradient_at_zero():
    tape = Tape()
    x = tape.watch([0.0], "x")
    loss = ad.sigmoid(x).sum()
    assert loss.item() == pytest.approx(0.5)
    assert gradient(tape, loss)["x"][0] == pytest.approx(0.25)


def test_non_scalar_loss_is_a_contract_error():
    tape = Tape()
    x = tape.watch(np.ones(3), "x")
    with pytest.raises(ContractError):
        gradient(tape, x * 2.0)


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.watch([1.0], "a")
    tape.watch([5.0, 6.0], "b")
    g = gradient(tape, (a * 3.0).sum())
    np.testing.assert_array_equal(g["b"], [0.0, 0.0])


def _spec(head="raw", act="leaky_relu", skips=()):
    return MlpSpec(input_dim=3, layer_widths=(5, 4, 2), activation=act,
                   skip_connections=skips, output_head=head)


def test_zero_weights_give_zero_output():
    spec = _spec()
    params = {n: Tensor(np.zeros(s)) for n, s in spec.param_shapes().items()}
    out = forward_mlp(spec, params, np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(out.data, np.zeros((4, 2)))


def test_identity_single_layer():
    spec = MlpSpec(input_dim=3, layer_widths=(3,), activation="none")
    params = {"0.w": Tensor(np.eye(3)), "0.b": Tensor(np.zeros(3))}
    x = np.array([[0.3, -1.2, 4.0]])
    np.testing.assert_array_equal(forward_mlp(spec, params, x).data, x)


def test_two_layer_matches_hand_arithmetic():
    spec = MlpSpec(input_dim=2, layer_widths=(2, 1), activation="relu")
    w0 = np.array([[1.0, -2.0], [0.5, 1.0]])
    b0 = np.array([0.1, 0.2])
    w1 = np.array([[3.0], [-1.0]])
    b1 = np.array([0.5])
    params = {"0.w": Tensor(w0), "0.b": Tensor(b0), "1.w": Tensor(w1), "1.b": Tensor(b1)}
    # hand computation for input (1, 1):
    # hidden pre = (1*1 + 1*0.5 + 0.1, 1*-2 + 1*1 + 0.2) = (1.6, -0.8); relu -> (1.6, 0)
    # out = 1.6*3 + 0*-1 + 0.5 = 5.3
    out = forward_mlp(spec, params, np.array([[1.0, 1.0]]))
    assert out.data[0, 0] == pytest.approx(5.3)


def test_input_width_mismatch():
    spec = _spec()
    params = {n: Tensor(np.zeros(s)) for n, s in spec.param_shapes().items()}
    with pytest.raises(DimensionError):
        forward_mlp(spec, params, np.zeros((2, 4)))


def test_missing_parameters_is_contract_error():
    spec = _spec()
    with pytest.raises(ContractError):
        forward_mlp(spec, {}, np.zeros((2, 3)))


@pytest.mark.parametrize("head", ["raw", "sigmoid", "softmax"])
@pytest.mark.parametrize("act", ["leaky_relu", "softplus"])
def test_mlp_gradient_matches_finite_differences(head, act):
    rng = np.random.default_rng(11)
    spec = MlpSpec(input_dim=3, layer_widths=(6, 5, 3), activation=act,
                   skip_connections=((0, 1),), output_head=head, softplus_beta=3.0)
    ps = init_mlp(spec, rng)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))

    def loss_of(values, xin):
        tape = Tape()
        params = {n: tape.watch(values[n], n) for n in values}
        xt = tape.watch(xin, "x")
        out = forward_mlp(spec, params, xt)
        return tape, ((out - target) ** 2).sum()

    tape, loss = loss_of(ps.values, x)
    grads = gradient(tape, loss)
    for name in list(ps.values) + ["x"]:
        base = x if name == "x" else ps.values[name]

        def f(arr, name=name):
            vals = dict(ps.values)
            xin = x
            if name == "x":
                xin = arr
            else:
                vals[name] = arr
            return loss_of(vals, xin)[1].item()

        fd = central_difference(f, base)
        assert max_relative_error(grads[name], fd, floor=1e-5) < 1e-4, name


def test_softmax_head_rows_are_distributions():
    rng = np.random.default_rng(3)
    spec = _spec(head="softmax")
    ps = init_mlp(spec, rng)
    out = forward_mlp(spec, ps.constants(), rng.normal(size=(50, 3)) * 10)
    assert (out.data >= 0).all()
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_is_replayable():
    rng = np.random.default_rng(5)
    spec = _spec()
    ps = init_mlp(spec, rng)
    x = rng.normal(size=(7, 3))
    a = forward_mlp(spec, ps.constants(), x).data
    b = forward_mlp(spec, ps.constants(), x).data
    np.testing.assert_array_equal(a, b)


def test_tangents_match_finite_differences_and_are_differentiable():
    rng = np.random.default_rng(8)
    spec = MlpSpec(input_dim=2, layer_widths=(8, 8, 1), activation="softplus",
                   skip_connections=((0, 1),), softplus_beta=4.0)
    ps = init_mlp(spec, rng)
    x = rng.uniform(-1, 1, size=(5, 2))
    tangents = np.concatenate([np.tile([1.0, 0.0], (5, 1)), np.tile([0.0, 1.0], (5, 1))])

    out, out_t = forward_mlp(spec, ps.constants(), x, tangents=tangents)
    grad_x = out_t.data.reshape(2, 5).T
    for i in range(5):
        fd = central_difference(
            lambda p: forward_mlp(spec, ps.constants(), p[None, :]).data[0, 0], x[i])
        np.testing.assert_allclose(grad_x[i], fd, rtol=1e-6, atol=1e-9)

    # second order: gradient of sum |grad_x f|^2 with respect to weights
    def eik(values):
        tape = Tape()
        params = {n: tape.watch(values[n], n) for n in values}
        _, t = forward_mlp(spec, params, x, tangents=tangents)
        return tape, (t * t).sum()

    tape, loss = eik(ps.values)
    grads = gradient(tape, loss)
    name = "1.w"

    def f(arr):
        vals = dict(ps.values)
        vals[name] = arr
        return eik(vals)[1].item()

    assert max_relative_error(grads[name], central_difference(f, ps.values[name]), 1e-5) < 1e-4


def test_conv3d_matches_direct_sum_and_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 4, 4, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    out = conv3d(x, w, b).data
    assert out.shape == (2, 2, 2, 2, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    direct = np.zeros_like(out)
    for n in range(2):
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * k:2 * k + 3, :]
                    direct[n, i, j, k] = np.einsum("abcq,abcqr->r", patch, w) + b
    np.testing.assert_allclose(out, direct, rtol=1e-12, atol=1e-12)

    def loss_of(xin, win):
        tape = Tape()
        xt = tape.watch(xin, "x")
        wt = tape.watch(win, "w")
        return tape, (conv3d(xt, wt, b) ** 2).sum()

    tape, loss = loss_of(x, w)
    g = gradient(tape, loss)
    fd_x = central_difference(lambda a: loss_of(a, w)[1].item(), x)
    fd_w = central_difference(lambda a: loss_of(x, a)[1].item(), w)
    assert max_relative_error(g["x"], fd_x, 1e-5) < 1e-4
    assert max_relative_error(g["w"], fd_w, 1e-5) < 1e-4


def test_adam_zero_gradient_leaves_parameters():
    ps = ParamSet({"w": np.array([1.0, -2.0])})
    adam_update(ps, {"w": np.zeros(2)}, lr=0.5, step=1)
    np.testing.assert_array_equal(ps["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    ps = ParamSet({"w": np.array([1.0, 1.0])})
    adam_update(ps, {"w": np.array([3.0, -0.2])}, lr=0.01, step=1)
    np.testing.assert_allclose(ps["w"], [0.99, 1.01], atol=1e-8)


def _reference_scalar_adam(w, lr, steps):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return w


def test_adam_quadratic_bowl():
    ps = ParamSet({"w": np.array([1.0])})
    for t in range(1, 201):
        adam_update(ps, {"w": 2.0 * ps["w"]}, lr=0.1, step=t)
    ref = _reference_scalar_adam(1.0, 0.1, 200)
    assert abs(ref) < 1e-2
    assert ps["w"][0] == pytest.approx(ref, abs=1e-12)


def test_adam_skips_non_finite_gradients():
    ps = ParamSet({"a": np.array([1.0]), "b": np.array([1.0])})
    adam_update(ps, {"a": np.array([np.nan]), "b": np.array([1.0])}, lr=0.1, step=1)
    assert ps["a"][0] == 1.0 and ps["b"][0] == pytest.approx(0.9)
    assert ps.skipped_updates == 1


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        ps = ParamSet({"w": rng.normal(size=5)})
        for t in range(1, 30):
            adam_update(ps, {"w": np.sin(ps["w"]) * 3}, lr=0.05, step=t)
        return ps["w"]
    assert run().tobytes() == run().tobytes()


def test_step_decay():
    assert step_decay(1e-3, 499) == 1e-3
    assert step_decay(1e-3, 500) == 5e-4
    assert step_decay(1e-3, 1000, interval=500) == 2.5e-4


def test_positional_encoding_values():
    out = positional_encode(np.zeros((1, 2)), order=3).data[0]
    assert out.shape == (2 * 7,)
    for k in range(3):
        base = 2 * (1 + 2 * k)
        np.testing.assert_array_equal(out[base:base + 2], 0.0)
        np.testing.assert_array_equal(out[base + 2:base + 4], 1.0)
    one = positional_encode(np.ones((1, 1)), order=1).data[0]
    assert one[1] == pytest.approx(0.0, abs=1e-12) and one[2] == pytest.approx(-1.0)
    q = positional_encode(np.array([[0.25]]), order=2).data[0]
    expected = [0.25, math.sin(math.pi * 0.25), math.cos(math.pi * 0.25),
                math.sin(2 * math.pi * 0.25), math.cos(2 * math.pi * 0.25)]
    np.testing.assert_allclose(q, expected, atol=1e-15)
    with pytest.raises(ValidationError):
        positional_encode(np.zeros((1, 1)), order=0)


def test_positional_encoding_jacobian():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, size=(3, 2))
    jac = positional_encode_jacobian(x, 3).reshape(2, 3, -1)
    for i in range(3):
        for j in range(2):
            def f(v, j=j):
                p = x[i].copy()
                p[j] = v[0]
                return positional_encode(p[None, :], 3).data[0]
            h = 1e-6
            fd = (f([x[i, j] + h]) - f([x[i, j] - h])) / (2 * h)
            np.testing.assert_allclose(jac[j, i], fd, atol=1e-6)


def test_geometric_init_is_roughly_a_disk():
    spec = MlpSpec(input_dim=2, layer_widths=(64, 64, 64, 1), activation="softplus",
                   skip_connections=((0, 2),))
    ps = geometric_init(spec, np.random.default_rng(0), radius=0.5)
    pts = np.array([[0.0, 0.0], [0.3, 0.0], [0.0, -0.45]])
    out = forward_mlp(spec, ps.constants(), pts).data[:, 0]
    assert out[0] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(out, 0.5 - np.linalg.norm(pts, axis=1), atol=0.1)
    assert out[0] > out[1] > out[2]


def test_mlp_spec_text_round_trip():
    spec = MlpSpec(5, (7, 7, 1), "softplus", ((0, 1),), "raw", 100.0, 0.01)
    assert MlpSpec.from_text(spec.to_text()) == spec
