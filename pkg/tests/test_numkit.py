import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrl.numkit import (
    AdamState,
    DomainError,
    Mlp,
    MlpSpec,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    forward_op,
)
from icrl.numkit.gradcheck import check_mlp_gradients


def test_matmul_hand_computed():
    tape = Tape()
    out = forward_op("matmul", [Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]])], tape)
    np.testing.assert_array_equal(out.data, [[3], [7]])
    assert len(tape) == 1


def test_relu_and_sigmoid_definitions():
    tape = Tape()
    np.testing.assert_array_equal(tape.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])
    assert tape.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_shape_mismatch_names_both_shapes():
    tape = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tape.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tape.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_domain_errors_name_the_op():
    tape = Tape()
    with pytest.raises(DomainError, match="log"):
        tape.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError, match="exp"):
        tape.exp(Tensor([800.0]))


def test_non_finite_result_is_an_error():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.multiply(Tensor([1e200]), Tensor([1e200]))


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op"):
        forward_op("tanh", [Tensor([1.0])], Tape())


def test_backward_sum_of_squares():
    tape = Tape()
    x = Tensor([1.0, 2.0, 3.0])
    loss = tape.sum(tape.square(x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [2.0, 4.0, 6.0])


def test_backward_sigmoid_slope_at_zero():
    tape = Tape()
    w, x = Tensor([[0.0]]), Tensor([[1.0]])
    loss = tape.sum(tape.sigmoid(tape.matmul(x, w)))
    assert backward(tape, loss)[w][0, 0] == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    tape = Tape()
    y = tape.square(Tensor([1.0, 2.0]))
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    a, b = Tensor([1.0, 2.0]), Tensor([[5.0]])
    loss = tape.sum(tape.exp(a))
    grads = backward(tape, loss, wrt=[a, b])
    np.testing.assert_array_equal(grads[b], [[0.0]])
    np.testing.assert_allclose(grads[a], np.exp([1.0, 2.0]))


def test_reused_input_accumulates():
    tape = Tape()
    x = Tensor([3.0])
    loss = tape.sum(tape.multiply(x, x))
    assert backward(tape, loss)[x][0] == pytest.approx(6.0)


def test_broadcast_bias_gradient_sums_batch():
    tape = Tape()
    h, b = Tensor(np.ones((4, 3))), Tensor(np.zeros(3))
    loss = tape.sum(tape.add(h, b))
    np.testing.assert_array_equal(backward(tape, loss)[b], [4.0, 4.0, 4.0])


def test_concat_mean_log_gradients():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.uniform(1, 2, (5, 2))), Tensor(rng.uniform(1, 2, (5, 1)))
    tape = Tape()
    loss = tape.mean(tape.log(tape.concat([a, b], axis=1)))
    g = backward(tape, loss)
    np.testing.assert_allclose(g[a], 1.0 / (15 * a.data))
    np.testing.assert_allclose(g[b], 1.0 / (15 * b.data))


def test_subtract_and_mean_axis():
    tape = Tape()
    a, b = Tensor(np.arange(6.0).reshape(3, 2)), Tensor([1.0, 1.0])
    loss = tape.sum(tape.mean(tape.subtract(a, b), axis=0))
    g = backward(tape, loss)
    np.testing.assert_allclose(g[a], np.full((3, 2), 1 / 3))
    np.testing.assert_allclose(g[b], [-1.0, -1.0])


@pytest.mark.parametrize("spec", [
    MlpSpec((10, 6, 1)),
    MlpSpec((10, 6, 1), ("relu", "sigmoid")),
    MlpSpec((3, 4, 4, 2), ("sigmoid", "relu", "identity")),
])
def test_mlp_gradients_match_finite_differences(spec):
    worst = check_mlp_gradients(spec, n_coords=100, seed=3)
    assert worst < 1e-4


def test_linearity_of_backward():
    rng = np.random.default_rng(1)
    net = Mlp(MlpSpec((4, 6, 1)), rng)
    x = rng.normal(size=(20, 4))
    y1, y2 = rng.normal(size=(20, 1)), rng.normal(size=(20, 1))

    def grads(targets):
        tape = Tape()
        leaves = net.leaves()
        out = net.forward(tape, x, leaves)
        terms = [tape.mean(tape.square(tape.subtract(out, y))) for y in targets]
        loss = terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])
        return backward(tape, loss, wrt=leaves.values()), leaves

    g_sum, leaves_sum = grads([y1, y2])
    g1, l1 = grads([y1])
    g2, l2 = grads([y2])
    for k in net.params:
        np.testing.assert_allclose(
            g_sum[leaves_sum[k]], g1[l1[k]] + g2[l2[k]], rtol=1e-12, atol=1e-12
        )


def test_tape_forward_matches_plain_forward():
    rng = np.random.default_rng(2)
    net = Mlp(MlpSpec((5, 6, 3), ("relu", "sigmoid")), rng)
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(net.forward(Tape(), x).data, net(x), rtol=1e-14)


def test_glorot_bounds_and_zero_bias():
    net = Mlp(MlpSpec((10, 6, 1)), 0)
    assert np.all(np.abs(net.params["0.W"]) <= np.sqrt(6 / 16))
    assert np.all(net.params["0.b"] == 0)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), ("tanh",))


def test_checkpoint_roundtrip():
    net = Mlp(MlpSpec((3, 6, 2)), 5)
    clone = Mlp.from_dict(net.to_dict())
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(clone(x), net(x))


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@given(st.floats(min_value=-1e3, max_value=1e3).filter(lambda g: abs(g) > 1e-3))
@settings(max_examples=50, deadline=None)
def test_adam_first_step_is_about_lr_times_sign(g):
    p = {"w": np.array([0.5])}
    state = AdamState(learning_rate=1e-3)
    adam_step(p, {"w": np.array([g])}, state)
    assert p["w"][0] - 0.5 == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    p = {"w": np.array([0.0])}
    state = AdamState(learning_rate=0.1)
    for _ in range(200):
        adam_step(p, {"w": 2 * (p["w"] - 3.0)}, state)
    assert abs(p["w"][0] - 3.0) < 0.1
    assert state.step == 200


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_training_is_deterministic():
    from icrl.numkit import fit_minibatch

    def run():
        rng = np.random.default_rng(11)
        x = rng.normal(size=(64, 3))
        y = x[:, :1] ** 2
        net = Mlp(MlpSpec((3, 6, 1)), rng)

        def loss(tape, leaves, idx):
            out = net.forward(tape, x[idx], leaves["f"])
            return tape.mean(tape.square(tape.subtract(out, y[idx])))

        fit_minibatch({"f": net}, loss, 64, epochs=5, batch_size=16, learning_rate=1e-2, rng=rng)
        return net.get_flat()

    np.testing.assert_array_equal(run(), run())


def test_softplus_is_stable_and_differentiates_to_sigmoid():
    tape = Tape()
    x = Tensor([-800.0, 0.0, 3.0, 800.0])
    out = tape.softplus(x)
    np.testing.assert_allclose(out.data, [0.0, np.log(2.0), np.log1p(np.exp(3.0)), 800.0])
    g = backward(tape, tape.sum(out), wrt=[x])[x]
    np.testing.assert_allclose(g, [0.0, 0.5, 1 / (1 + np.exp(-3.0)), 1.0])
