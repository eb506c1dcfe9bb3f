import numpy as np
import pytest

from refex.autodiff import (AdamState, OP_KINDS, Optimizer, ShapeError, Tape, Value, clip_grads,
                            global_norm, sgd_step)

from conftest import numeric_grad, op_inputs, rel_error

SEEDS = range(100)


@pytest.mark.parametrize("kind", OP_KINDS)
def test_every_op_matches_finite_differences(kind):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        xs, attrs = op_inputs(rng, kind)
        weight = None

        def loss(tape):
            out = tape.record(kind, *xs, **attrs)
            nonlocal weight
            if weight is None:
                weight = np.random.default_rng(seed + 1000).normal(size=out.shape)
            return tape.sum(tape.mul(out, Value(weight)))

        tape = Tape()
        tape.backward(loss(tape))
        for x in xs:
            num = numeric_grad(lambda: loss(Tape(grad=False)).item(), x)
            worst = max(worst, rel_error(x.grad, num))
    assert worst < 1e-5, f"{kind}: {worst:.2e}"


def test_matmul_example():
    out = Tape().matmul(Value([[1, 2], [3, 4]]), Value([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_softmax_of_zeros_is_uniform():
    out = Tape().softmax(Value(np.zeros((3, 1))))
    assert np.allclose(out.data, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_columns_sum_to_one_and_are_positive():
    rng = np.random.default_rng(0)
    out = Tape().softmax(Value(rng.normal(scale=30, size=(7, 50))))
    assert np.all(out.data > 0)
    assert np.max(np.abs(out.data.sum(axis=0) - 1)) < 1e-12


def test_concat_rows_stacks_in_order():
    a, b, c = Value(np.ones((3, 1))), Value(2 * np.ones((5, 1))), Value(3 * np.ones((2, 1)))
    out = Tape().concat_rows(a, b, c)
    assert out.shape == (10, 1)
    assert np.array_equal(out.data[:, 0], [1] * 3 + [2] * 5 + [3] * 2)


def test_square_gradient():
    x = Value(3.0)
    tape = Tape()
    loss = tape.mul(x, x)
    tape.backward(loss)
    assert x.grad[0, 0] == 6.0
    assert loss.grad[0, 0] == 1.0


def test_two_consumers_accumulate():
    x = Value(2.0)
    tape = Tape()
    loss = tape.add(tape.scale(x, 3.0), tape.scale(x, 4.0))
    tape.backward(loss)
    assert x.grad[0, 0] == 7.0


def test_log_softmax_entry_matches_jacobian_row():
    rng = np.random.default_rng(11)
    x = Value(rng.normal(size=(5, 1)))
    j = 2

    def f(tape):
        return tape.sum(tape.mul(tape.log(tape.softmax(x)), Value(np.eye(5)[:, [j]])))

    tape = Tape()
    tape.backward(f(tape))
    p = np.exp(x.data - x.data.max())
    p /= p.sum()
    analytic = np.eye(5)[:, j] - p[:, 0]
    assert np.allclose(x.grad[:, 0], analytic, atol=1e-12)
    assert rel_error(x.grad, numeric_grad(lambda: f(Tape(grad=False)).item(), x)) < 1e-5


def test_shape_errors_name_the_op():
    tape = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        tape.matmul(Value(np.ones((2, 3))), Value(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tape.add(Value(np.ones((2, 1))), Value(np.ones((3, 1))))


def test_backward_rejects_non_scalar():
    tape = Tape()
    out = tape.scale(Value(np.ones((2, 1))), 2.0)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_grad_shape_matches_data():
    tape = Tape()
    w, x = Value(np.ones((3, 4))), Value(np.ones((4, 2)))
    tape.backward(tape.sum(tape.matmul(w, x)))
    assert w.grad.shape == w.data.shape and x.grad.shape == x.data.shape


def test_tape_is_topological():
    tape = Tape()
    a, b = Value(np.ones((2, 2))), Value(np.ones((2, 2)))
    c = tape.mul(tape.add(a, b), a)
    tape.sum(tape.tanh(c))
    seen = {a.node_id, b.node_id}
    for entry in tape.entries:
        assert all(v.node_id in seen for v in entry.inputs)
        seen.add(entry.output.node_id)


def test_backward_is_deterministic():
    grads = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        w, x = Value(rng.normal(size=(4, 4))), Value(rng.normal(size=(4, 3)))
        tape = Tape()
        tape.backward(tape.mean(tape.sigmoid(tape.matmul(w, tape.tanh(x)))))
        grads.append((w.grad.tobytes(), x.grad.tobytes()))
    assert grads[0] == grads[1]


def test_sgd_examples():
    x = Value(1.0)
    x.grad = np.array([[2.0]])
    sgd_step([x], 0.5, max_norm=None)
    assert x.data[0, 0] == 0.0
    assert x._grad is None

    y = Value([[1.5, -2.0]])
    y.grad = np.array([[3.0, 4.0]])
    sgd_step([y], 0.0, max_norm=None)
    assert np.array_equal(y.data, [[1.5, -2.0]])


def test_adam_first_step_is_sign_of_gradient():
    g = np.array([[0.3, -2e-3, 50.0]])
    x = Value(np.zeros((1, 3)))
    x.grad = g
    sgd_step([x], 0.01, AdamState(), max_norm=None)
    # bias-corrected first step: -lr * g / (|g| + eps)
    assert np.allclose(x.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    assert np.allclose(x.data, -0.01 * np.sign(g), rtol=1e-5)


def test_clipping_caps_global_norm():
    a, b = Value(np.zeros((2, 1))), Value(np.zeros((1, 1)))
    a.grad, b.grad = np.array([[3.0], [0.0]]), np.array([[4.0]])
    norm = clip_grads([a, b], 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm([a, b]) == pytest.approx(1.0)


def test_optimizer_zero_grad():
    x = Value(np.ones((2, 2)))
    x.grad = np.ones((2, 2))
    Optimizer([x], "sgd", 0.1).zero_grad()
    assert np.array_equal(x.grad, np.zeros((2, 2)))
