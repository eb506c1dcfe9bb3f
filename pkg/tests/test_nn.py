import numpy as np
import pytest

from refex.autodiff import ShapeError, Tape, Value
from refex.nn import (INIT_SCALE, Affine, EmbeddingTable, LstmParams, bilstm_mean_encode, embed,
                      lstm_step, one_hot, run_lstm)

from conftest import numeric_grad, rel_error

SEEDS = range(50)


def _scaled_lstm(rng, input_dim, hidden_dim):
    p = LstmParams(input_dim, hidden_dim, rng)
    for v in p.params():
        v.data = rng.uniform(-1, 1, size=v.data.shape)
    return p


def test_init_ranges():
    rng = np.random.default_rng(0)
    p = LstmParams(5, 7, rng)
    for name, v in p.named_params():
        if name == "b_f":
            assert np.all(v.data == 1.0)
        else:
            assert np.abs(v.data).max() <= INIT_SCALE
    assert p.W_i.shape == p.W_f.shape == p.W_o.shape == p.W_g.shape == (7, 12)


def test_embed_one_hot_selects_a_column():
    table = EmbeddingTable(4, 6, np.random.default_rng(1))
    out = embed(Tape(), table, Value(one_hot([2], 6)))
    assert np.array_equal(out.data[:, 0], table.E.data[:, 2])


def test_embed_uniform_pair_averages():
    table = EmbeddingTable(4, 6, np.random.default_rng(1))
    col = np.zeros((6, 1))
    col[[1, 4]] = 0.5
    out = embed(Tape(), table, Value(col))
    assert np.allclose(out.data[:, 0], (table.E.data[:, 1] + table.E.data[:, 4]) / 2, atol=1e-15)


def test_embed_is_linear_in_the_distribution():
    rng = np.random.default_rng(2)
    table = EmbeddingTable(5, 7, rng)
    p, q = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
    a = 0.3
    mix = embed(Tape(), table, Value(a * p + (1 - a) * q)).data
    parts = a * embed(Tape(), table, Value(p)).data + (1 - a) * embed(Tape(), table, Value(q)).data
    assert np.allclose(mix, parts, rtol=0, atol=1e-14)


def test_embed_rejects_bad_columns():
    table = EmbeddingTable(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        embed(Tape(), table, Value(np.ones((5, 1)) / 5))
    with pytest.raises(ValueError):
        embed(Tape(), table, Value(np.ones((4, 1))))


def test_embed_gradient_reaches_the_soft_column():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        table = EmbeddingTable(3, 4, rng)
        col = Value(rng.dirichlet(np.ones(4))[:, None])
        w = rng.normal(size=(3, 1))
        tape = Tape()
        tape.backward(tape.sum(tape.mul(embed(tape, table, col), Value(w))))
        f = lambda: float((table.E.data @ col.data * w).sum())
        # perturbing one entry breaks the sum-to-one check, so differentiate the raw product
        assert rel_error(col.grad, numeric_grad(f, col)) < 1e-5
        assert rel_error(table.E.grad, numeric_grad(f, table.E)) < 1e-5


def test_lstm_zero_weights():
    p = LstmParams(3, 4, np.random.default_rng(0), forget_bias=0.0)
    for v in p.params():
        v.data = np.zeros_like(v.data)
    x = Value(np.random.default_rng(1).normal(size=(3, 1)))
    h, c = p.zero_state()
    h2, c2 = lstm_step(Tape(), p, x, h, c)
    assert np.array_equal(c2.data, np.zeros((4, 1)))
    assert np.array_equal(h2.data, np.zeros((4, 1)))


def test_lstm_hidden_is_bounded():
    rng = np.random.default_rng(3)
    p = _scaled_lstm(rng, 3, 5)
    h, c = p.zero_state(2)
    tape = Tape()
    for _ in range(10):
        h, c = lstm_step(tape, p, Value(rng.normal(scale=5, size=(3, 2))), h, c)
        assert np.all(np.abs(h.data) < 1)


def test_lstm_shape_mismatch():
    p = LstmParams(3, 4, np.random.default_rng(0))
    h, c = p.zero_state()
    with pytest.raises(ShapeError):
        lstm_step(Tape(), p, Value(np.zeros((2, 1))), h, c)


def test_lstm_gradients_match_finite_differences():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        p = _scaled_lstm(rng, 3, 4)
        x = Value(rng.uniform(-2, 2, size=(3, 2)))
        h0 = Value(rng.uniform(-1, 1, size=(4, 2)))
        c0 = Value(rng.uniform(-1, 1, size=(4, 2)))
        w = rng.normal(size=(4, 2))

        def loss(tape):
            h, c = lstm_step(tape, p, x, h0, c0)
            h, c = lstm_step(tape, p, x, h, c)
            return tape.sum(tape.mul(h, Value(w)))

        tape = Tape()
        tape.backward(loss(tape))
        for v in p.params() + [x, h0, c0]:
            worst = max(worst, rel_error(v.grad, numeric_grad(lambda: loss(Tape(grad=False)).item(), v)))
    assert worst < 1e-5


def test_affine_gradients_match_finite_differences():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        layer = Affine(4, 3, rng)
        x = Value(rng.uniform(-2, 2, size=(4, 5)))
        w = rng.normal(size=(3, 5))
        loss = lambda tape: tape.sum(tape.mul(tape.tanh(layer(tape, x)), Value(w)))
        tape = Tape()
        tape.backward(loss(tape))
        for v in layer.params() + [x]:
            worst = max(worst, rel_error(v.grad, numeric_grad(lambda: loss(Tape(grad=False)).item(), v)))
    assert worst < 1e-5


def test_bilstm_gradients_match_finite_differences():
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fw, bw = _scaled_lstm(rng, 2, 3), _scaled_lstm(rng, 2, 3)
        xs = [Value(rng.uniform(-2, 2, size=(2, 1))) for _ in range(3)]
        w = rng.normal(size=(6, 1))
        loss = lambda tape: tape.sum(tape.mul(bilstm_mean_encode(tape, fw, bw, xs), Value(w)))
        tape = Tape()
        tape.backward(loss(tape))
        for v in fw.params() + bw.params() + xs:
            worst = max(worst, rel_error(v.grad, numeric_grad(lambda: loss(Tape(grad=False)).item(), v)))
    assert worst < 1e-5


def test_bilstm_single_step_mean():
    rng = np.random.default_rng(4)
    fw, bw = _scaled_lstm(rng, 2, 3), _scaled_lstm(rng, 2, 3)
    x = Value(rng.normal(size=(2, 1)))
    tape = Tape()
    out = bilstm_mean_encode(tape, fw, bw, [x])
    hf = run_lstm(tape, fw, [x])[0].data
    hb = run_lstm(tape, bw, [x])[0].data
    assert np.allclose(out.data, np.vstack([hf, hb]), rtol=0, atol=1e-15)


def test_bilstm_palindrome_symmetry():
    rng = np.random.default_rng(5)
    p = _scaled_lstm(rng, 2, 3)
    a, b, c = (rng.normal(size=(2, 1)) for _ in range(3))
    seq = [Value(v) for v in (a, b, c, b, a)]
    tape = Tape()
    hf = run_lstm(tape, p, seq)
    hb = run_lstm(tape, p, seq[::-1])  # hb[k] belongs to position T-1-k
    for t in range(5):
        assert np.allclose(hf[t].data, hb[t].data, rtol=0, atol=1e-15)


def test_bilstm_output_length_is_fixed():
    rng = np.random.default_rng(6)
    fw, bw = _scaled_lstm(rng, 2, 3), _scaled_lstm(rng, 2, 3)
    for T in (1, 2, 7):
        out = bilstm_mean_encode(Tape(), fw, bw, [Value(rng.normal(size=(2, 1))) for _ in range(T)])
        assert out.shape == (6, 1)


def test_bilstm_rejects_empty():
    p = LstmParams(2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        bilstm_mean_encode(Tape(), p, p, [])


def test_bilstm_is_order_aware():
    changed = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fw, bw = _scaled_lstm(rng, 2, 3), _scaled_lstm(rng, 2, 3)
        xs = [Value(rng.normal(size=(2, 1))) for _ in range(4)]
        perm = [xs[i] for i in (2, 0, 3, 1)]
        a = bilstm_mean_encode(Tape(), fw, bw, xs).data
        b = bilstm_mean_encode(Tape(), fw, bw, perm).data
        changed += not np.allclose(a, b, atol=1e-9)
    assert changed == 20
