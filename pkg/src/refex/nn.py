"""Layers on top of the tape: embeddings, affine maps and LSTMs."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Value, parameter

INIT_SCALE = 0.08


def uniform_init(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class Module:
    """Anything owning named parameters. Subclasses list children in ``_children``."""

    _children: tuple[str, ...] = ()
    _leaves: tuple[str, ...] = ()

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name in self._leaves:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            yield from getattr(self, name).named_params(f"{prefix}{name}.")

    def params(self) -> list[Value]:
        return [v for _, v in self.named_params()]


class Affine(Module):
    """``W x + b`` applied column-wise."""

    _leaves = ("W", "b")

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = parameter(uniform_init(rng, (out_dim, in_dim)))
        self.b = parameter(uniform_init(rng, (out_dim, 1)))

    def __call__(self, tape: Tape, x: Value) -> Value:
        return tape.add_bias(tape.matmul(self.W, x), self.b)


class EmbeddingTable(Module):
    """Embedding matrix ``E`` of shape (embed_dim, vocab_size)."""

    _leaves = ("E",)

    def __init__(self, embed_dim: int, vocab_size: int, rng: np.random.Generator):
        self.embed_dim, self.vocab_size = embed_dim, vocab_size
        self.E = parameter(uniform_init(rng, (embed_dim, vocab_size)))

    def __call__(self, tape: Tape, column: Value) -> Value:
        return embed(tape, self, column)


def embed(tape: Tape, table: EmbeddingTable, column: Value) -> Value:
    """``E @ column`` for one-hot or distribution columns (one per batch item)."""
    if column.shape[0] != table.vocab_size:
        raise ShapeError(f"embed: column length {column.shape[0]} != vocab size {table.vocab_size}")
    d = column.data
    if d.min() < 0 or np.abs(d.sum(axis=0) - 1.0).max() > 1e-9:
        raise ValueError("embed: columns must be non-negative and sum to 1")
    return tape.matmul(table.E, column)


def one_hot(indices: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros((size, len(indices)))
    out[list(indices), np.arange(len(indices))] = 1.0
    return out


class LstmParams(Module):
    """Four gates, each with a (hidden, input + hidden) weight and a hidden bias."""

    _leaves = ("W_i", "W_f", "W_o", "W_g", "b_i", "b_f", "b_o", "b_g")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 forget_bias: float = 1.0):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        shape = (hidden_dim, input_dim + hidden_dim)
        for gate in "ifog":
            setattr(self, f"W_{gate}", parameter(uniform_init(rng, shape)))
        for gate in "iog":
            setattr(self, f"b_{gate}", parameter(uniform_init(rng, (hidden_dim, 1))))
        self.b_f = parameter(np.full((hidden_dim, 1), forget_bias))

    def zero_state(self, batch: int = 1) -> tuple[Value, Value]:
        return Value(np.zeros((self.hidden_dim, batch))), Value(np.zeros((self.hidden_dim, batch)))


def lstm_step(tape: Tape, p: LstmParams, x: Value, h: Value, c: Value) -> tuple[Value, Value]:
    if x.shape[0] != p.input_dim or h.shape[0] != p.hidden_dim or c.shape != h.shape:
        raise ShapeError(
            f"lstm_step: x{x.shape} h{h.shape} c{c.shape} vs declared "
            f"input_dim={p.input_dim} hidden_dim={p.hidden_dim}"
        )
    xh = tape.concat_rows(x, h)
    i = tape.sigmoid(tape.add_bias(tape.matmul(p.W_i, xh), p.b_i))
    f = tape.sigmoid(tape.add_bias(tape.matmul(p.W_f, xh), p.b_f))
    o = tape.sigmoid(tape.add_bias(tape.matmul(p.W_o, xh), p.b_o))
    g = tape.tanh(tape.add_bias(tape.matmul(p.W_g, xh), p.b_g))
    c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
    h_new = tape.mul(o, tape.tanh(c_new))
    return h_new, c_new


def run_lstm(tape: Tape, p: LstmParams, xs: Sequence[Value]) -> list[Value]:
    h, c = p.zero_state(xs[0].shape[1])
    hs = []
    for x in xs:
        h, c = lstm_step(tape, p, x, h, c)
        hs.append(h)
    return hs


def bilstm_mean_encode(tape: Tape, fw: LstmParams, bw: LstmParams,
                       embedded: Sequence[Value]) -> Value:
    """Mean over time of the concatenated forward/backward hidden states.

    Returns a (2 * hidden, batch) value whatever the sequence length.
    """
    if len(embedded) == 0:
        raise ValueError("bilstm_mean_encode: empty sequence")
    T = len(embedded)
    hf = run_lstm(tape, fw, embedded)
    hb = run_lstm(tape, bw, embedded[::-1])
    mean_f = tape.scale(tape.add_n(hf), 1.0 / T)
    mean_b = tape.scale(tape.add_n(hb), 1.0 / T)
    return tape.concat_rows(mean_f, mean_b)
