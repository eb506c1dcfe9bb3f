"""Expression generator: affine visual encoder feeding an LSTM decoder.

All functions work on batches of columns. ``feats`` is a (FEATURE_DIM, B)
array of concat(o, g, l) columns, one per (scene, target) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Value
from .nn import Affine, EmbeddingTable, LstmParams, Module, embed, lstm_step, one_hot
from .vocab import TokenSeq, Vocab
from .world import FEATURE_DIM


@dataclass(frozen=True)
class ModelDims:
    embed: int = 32
    hidden: int = 64
    visual: int = 64
    feature: int = FEATURE_DIM


class GeneratorParams(Module):
    _children = ("visual", "embed", "decoder", "output")

    def __init__(self, vocab_size: int, dims: ModelDims, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.dims = dims
        self.visual = Affine(dims.feature, dims.visual, rng)
        self.embed = EmbeddingTable(dims.embed, vocab_size, rng)
        self.decoder = LstmParams(dims.visual + dims.embed, dims.hidden, rng)
        self.output = Affine(dims.hidden, vocab_size, rng)


@dataclass
class SoftSeq:
    """Per-step word distributions, one (vocab, 1) column per position.

    ``n_fixed`` leading columns are one-hot constants (ground-truth prefix);
    the rest are live tape nodes.
    """

    columns: list[Value]
    tokens: TokenSeq
    n_fixed: int = 0

    @property
    def effective_length(self) -> int:
        return len(self.columns)

    def matrix(self) -> np.ndarray:
        return np.hstack([c.data for c in self.columns])


@dataclass
class StepOut:
    logits: Value
    state: tuple[Value, Value]
    _probs: Value | None = None
    _logprobs: Value | None = None

    def probs(self, tape: Tape) -> Value:
        if self._probs is None:
            self._probs = tape.softmax(self.logits)
        return self._probs

    def logprobs(self, tape: Tape) -> Value:
        if self._logprobs is None:
            self._logprobs = tape.log_softmax(self.logits)
        return self._logprobs


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def encode_visual(tape: Tape, p: GeneratorParams, feats) -> Value:
    feats = _as_value(feats)
    if feats.shape[0] != p.dims.feature:
        raise ShapeError(f"encode_visual: feature rows {feats.shape[0]} != {p.dims.feature}")
    return p.visual(tape, feats)


def encode_visual_parts(tape: Tape, p: GeneratorParams, o, g, l) -> Value:
    return encode_visual(tape, p, np.concatenate([np.ravel(o), np.ravel(g), np.ravel(l)]))


def initial_state(p: GeneratorParams, batch: int) -> tuple[Value, Value]:
    return p.decoder.zero_state(batch)


def step_distribution(tape: Tape, p: GeneratorParams, v: Value, prev: Value,
                      state: tuple[Value, Value]) -> StepOut:
    """One decoder step. ``prev`` is a one-hot or soft (vocab, B) column block."""
    x = tape.concat_rows(v, embed(tape, p.embed, prev))
    h, c = lstm_step(tape, p.decoder, x, *state)
    return StepOut(p.output(tape, h), (h, c))


def _token_matrix(expressions: Sequence[TokenSeq]) -> np.ndarray:
    lengths = {len(e) for e in expressions}
    if len(lengths) != 1:
        raise ValueError("a teacher-forced batch needs equal-length expressions")
    return np.array([e.tokens for e in expressions], dtype=np.int64).T  # (L, B)


def teacher_forced(tape: Tape, p: GeneratorParams, feats, expressions: Sequence[TokenSeq],
                   vocab: Vocab) -> list[StepOut]:
    """Decoder steps fed with ground-truth prefixes; step t predicts token t."""
    toks = _token_matrix(expressions)
    if toks.max() >= p.vocab_size or toks.min() < 0:
        raise ValueError("token outside vocabulary")
    L, B = toks.shape
    v = encode_visual(tape, p, feats)
    state = initial_state(p, B)
    prev = np.full(B, vocab.bos)
    steps = []
    for t in range(L):
        out = step_distribution(tape, p, v, Value(one_hot(prev, p.vocab_size)), state)
        steps.append(out)
        state = out.state
        prev = toks[t]
    return steps


def xent_from_steps(tape: Tape, steps: Sequence[StepOut], expressions: Sequence[TokenSeq],
                    vocab_size: int, n_steps: int | None = None) -> Value:
    """Per-token mean negative log-likelihood over the first ``n_steps`` steps."""
    toks = _token_matrix(expressions)
    L, B = toks.shape
    n = L if n_steps is None else min(n_steps, L)
    if n == 0:
        return Value(0.0)
    picked = [tape.sum(tape.mul(steps[t].logprobs(tape), Value(one_hot(toks[t], vocab_size))))
              for t in range(n)]
    return tape.scale(tape.add_n(picked), -1.0 / (n * B))


def xent_loss(tape: Tape, p: GeneratorParams, feats, expressions: Sequence[TokenSeq],
              vocab: Vocab) -> Value:
    for e in expressions:
        if not e.terminated(vocab):
            raise ValueError("xent_loss: expression must end with <eos>")
    steps = teacher_forced(tape, p, feats, expressions, vocab)
    return xent_from_steps(tape, steps, expressions, p.vocab_size)


def soft_from_steps(tape: Tape, steps: Sequence[StepOut], expression: TokenSeq) -> SoftSeq:
    """Teacher-forced soft sequence for a single example (batch of one)."""
    return SoftSeq([s.probs(tape) for s in steps], expression)


# --- decoding ---------------------------------------------------------------------


def _allowed_mask(vocab: Vocab, size: int) -> np.ndarray:
    mask = np.ones(size, dtype=bool)
    mask[[vocab.pad, vocab.bos]] = False
    return mask


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _draw(rng: np.random.Generator, probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """One categorical draw per column, restricted to ``mask`` and renormalised."""
    q = probs * mask[:, None]
    cdf = np.cumsum(q, axis=0)
    u = rng.random(q.shape[1]) * cdf[-1]
    idx = (cdf < u[None, :]).sum(axis=0)
    return np.minimum(idx, q.shape[0] - 1)


def _finish(rows: np.ndarray, vocab: Vocab) -> list[TokenSeq]:
    out = []
    for col in rows.T:
        toks = []
        for t in col:
            toks.append(int(t))
            if t == vocab.eos:
                break
        out.append(TokenSeq(tuple(toks)))
    return out


def _decode(p: GeneratorParams, feats, t_max: int, vocab: Vocab, rng=None):
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    tape = Tape(grad=False)
    feats = _as_value(feats)
    B = feats.shape[1]
    v = encode_visual(tape, p, feats)
    state = initial_state(p, B)
    prev = np.full(B, vocab.bos)
    mask = _allowed_mask(vocab, p.vocab_size)
    rows, dists = [], []
    done = np.zeros(B, dtype=bool)
    for _ in range(t_max):
        out = step_distribution(tape, p, v, Value(one_hot(prev, p.vocab_size)), state)
        probs = _softmax_np(out.logits.data)
        if rng is None:
            tok = np.where(mask[:, None], out.logits.data, -np.inf).argmax(axis=0)
        else:
            tok = _draw(rng, probs, mask)
        rows.append(tok)
        dists.append(probs)
        state = out.state
        prev = tok
        done |= tok == vocab.eos
        if done.all():
            break
    return np.array(rows), dists


def greedy_decode_batch(p: GeneratorParams, feats, t_max: int, vocab: Vocab) -> list[TokenSeq]:
    rows, _ = _decode(p, feats, t_max, vocab)
    return _finish(rows, vocab)


def greedy_decode(p: GeneratorParams, feats, t_max: int, vocab: Vocab) -> TokenSeq:
    """Argmax decoding for one region; ``feats`` is a single feature column."""
    return greedy_decode_batch(p, np.reshape(feats, (-1, 1)), t_max, vocab)[0]


def sample_decode_batch(p: GeneratorParams, feats, t_max: int, vocab: Vocab,
                        rng: np.random.Generator):
    """Ancestral samples, one per column; returns sequences and their step distributions.

    ``<pad>`` and ``<bos>`` are never drawn. Distributions of step t for
    sequence b are ``dists[t][:, b]`` for t < len(seq b).
    """
    rows, dists = _decode(p, feats, t_max, vocab, rng=rng)
    return _finish(rows, vocab), dists


def sample_decode(p: GeneratorParams, feats, t_max: int, vocab: Vocab, rng: np.random.Generator):
    seqs, dists = sample_decode_batch(p, np.reshape(feats, (-1, 1)), t_max, vocab, rng)
    seq = seqs[0]
    return seq, [d[:, 0] for d in dists[:len(seq)]]


def sequence_logprobs(p: GeneratorParams, feats, seqs: Sequence[TokenSeq],
                      vocab: Vocab) -> np.ndarray:
    """log p_G(c_k | c_<k) summed per sequence, plus lengths; (2, N) array.

    Sequences of different lengths are bucketed so every batch is exact.
    """
    feats = np.asarray(feats)
    if feats.ndim == 1:
        feats = feats[:, None]
    n = len(seqs)
    total = np.zeros(n)
    lengths = np.array([len(s) for s in seqs], dtype=float)
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        buckets.setdefault(len(s), []).append(i)
    for length, idx in sorted(buckets.items()):
        tape = Tape(grad=False)
        cols = feats[:, idx] if feats.shape[1] == n else np.repeat(feats, len(idx), axis=1)
        steps = teacher_forced(tape, p, cols, [seqs[i] for i in idx], vocab)
        toks = _token_matrix([seqs[i] for i in idx])
        acc = np.zeros(len(idx))
        for t, st in enumerate(steps):
            lp = st.logprobs(tape).data
            acc += lp[toks[t], np.arange(len(idx))]
        total[idx] = acc
    return np.vstack([total, lengths])


# --- soft sequences for proxy training -------------------------------------------


@dataclass
class GroundTruth:
    expression: TokenSeq


@dataclass
class Sampled:
    rng: np.random.Generator
    t_max: int = 10


@dataclass
class Mixed:
    """Ground truth for the first ``n_fixed`` positions, sampled afterwards."""

    expression: TokenSeq
    n_fixed: int
    rng: np.random.Generator
    t_max: int = 10


@dataclass
class SoftRun:
    soft: SoftSeq
    steps: list[StepOut] = field(default_factory=list)


def soft_sequence(tape: Tape, p: GeneratorParams, feats, policy, vocab: Vocab) -> SoftRun:
    """Build P for one example under the given prefix policy.

    Returns the soft sequence and the decoder steps that produced it (the
    L_gen terms for ground-truth positions come from the same steps).
    """
    feats = np.reshape(np.asarray(feats), (-1, 1))
    if isinstance(policy, GroundTruth):
        if policy.expression is None:
            raise ValueError("ground-truth policy needs an expression")
        steps = teacher_forced(tape, p, feats, [policy.expression], vocab)
        return SoftRun(soft_from_steps(tape, steps, policy.expression), steps)
    if isinstance(policy, Sampled):
        gt, n_fixed, rng, t_max = (), 0, policy.rng, policy.t_max
    elif isinstance(policy, Mixed):
        if policy.expression is None:
            raise ValueError("mixed policy needs an expression")
        gt = policy.expression.tokens
        n_fixed = min(policy.n_fixed, len(gt))
        rng, t_max = policy.rng, policy.t_max
    else:
        raise TypeError(f"unknown prefix policy {policy!r}")

    V = p.vocab_size
    mask = _allowed_mask(vocab, V)
    v = encode_visual(tape, p, feats)
    state = initial_state(p, 1)
    prev = vocab.bos
    columns: list[Value] = []
    tokens: list[int] = []
    steps: list[StepOut] = []
    for t in range(max(t_max, n_fixed)):
        out = step_distribution(tape, p, v, Value(one_hot([prev], V)), state)
        steps.append(out)
        state = out.state
        if t < n_fixed:
            tok = gt[t]
            columns.append(Value(one_hot([tok], V)))
        else:
            col = out.probs(tape)
            columns.append(col)
            tok = int(_draw(rng, col.data, mask)[0])
        tokens.append(int(tok))
        prev = tok
        if tok == vocab.eos:
            break
    return SoftRun(SoftSeq(columns, TokenSeq(tuple(tokens)), n_fixed), steps)


@dataclass
class SoftBatch:
    """Soft sequences for a batch of examples decoded together.

    ``steps[t]`` holds the batched decoder output at position t; column b is
    live for ``lengths[b]`` positions, of which the first ``n_fixed`` are
    ground truth.
    """

    steps: list[StepOut]
    tokens: list[TokenSeq]
    lengths: np.ndarray
    n_fixed: int
    fixed_tokens: np.ndarray  # (n_fixed, B)
    vocab_size: int

    def groups(self, tape: Tape) -> list[tuple[np.ndarray, list[Value]]]:
        """(column indices, per-position (vocab, k) blocks) for each distinct length."""
        B = len(self.tokens)
        out = []
        for length in sorted(set(int(x) for x in self.lengths)):
            idx = np.flatnonzero(self.lengths == length)
            select = np.zeros((B, len(idx)))
            select[idx, np.arange(len(idx))] = 1.0
            sel = Value(select)
            cols = []
            for t in range(length):
                if t < self.n_fixed:
                    cols.append(Value(one_hot(self.fixed_tokens[t, idx], self.vocab_size)))
                else:
                    cols.append(tape.matmul(self.steps[t].probs(tape), sel))
            out.append((idx, cols))
        return out


def soft_sequence_batch(tape: Tape, p: GeneratorParams, feats, vocab: Vocab, rng: np.random.Generator,
                        expressions: Sequence[TokenSeq] | None = None, n_fixed: int = 0,
                        t_max: int = 10) -> SoftBatch:
    """Batched counterpart of ``soft_sequence`` with a shared prefix length.

    Expressions, when given, must share one length; ``n_fixed`` is clipped to it.
    """
    feats = _as_value(feats)
    B = feats.shape[1]
    if expressions is None:
        n_fixed, gt = 0, np.zeros((0, B), dtype=np.int64)
    else:
        gt = _token_matrix(expressions)
        if gt.shape[1] != B:
            raise ShapeError("one expression per feature column")
        n_fixed = min(n_fixed, gt.shape[0])
    V = p.vocab_size
    mask = _allowed_mask(vocab, V)
    v = encode_visual(tape, p, feats)
    state = initial_state(p, B)
    prev = np.full(B, vocab.bos)
    lengths = np.zeros(B, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    rows, steps = [], []
    for t in range(max(t_max, n_fixed)):
        out = step_distribution(tape, p, v, Value(one_hot(prev, V)), state)
        steps.append(out)
        state = out.state
        if t < n_fixed:
            tok = gt[t]
        else:
            tok = _draw(rng, out.probs(tape).data, mask)
        rows.append(tok)
        lengths[~done] += 1
        done |= tok == vocab.eos
        prev = tok
        if done.all():
            break
    tokens = [TokenSeq(tuple(int(x) for x in col[:n])) for col, n in zip(np.array(rows).T, lengths)]
    return SoftBatch(steps, tokens, lengths, n_fixed, gt[:n_fixed], V)
