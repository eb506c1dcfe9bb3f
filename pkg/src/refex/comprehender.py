"""Comprehension model: bi-LSTM query encoder matched to regions by dot product."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tape, Value
from .generator import ModelDims, SoftSeq
from .nn import Affine, EmbeddingTable, LstmParams, Module, bilstm_mean_encode, embed, one_hot
from .vocab import TokenSeq

LOSS_KINDS = ("softmax", "logistic")


class ComprehenderParams(Module):
    _children = ("visual", "embed", "fw", "bw", "projection")

    def __init__(self, vocab_size: int, dims: ModelDims, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.dims = dims
        self.visual = Affine(dims.feature, dims.visual, rng)
        self.embed = EmbeddingTable(dims.embed, vocab_size, rng)
        self.fw = LstmParams(dims.embed, dims.hidden, rng)
        self.bw = LstmParams(dims.embed, dims.hidden, rng)
        self.projection = Affine(2 * dims.hidden, dims.visual, rng)


def query_columns(query, vocab_size: int) -> list[Value]:
    """One (vocab, B) block per position from a TokenSeq, SoftSeq or equal-length batch."""
    if isinstance(query, SoftSeq):
        return list(query.columns)
    if isinstance(query, TokenSeq):
        return [Value(one_hot([t], vocab_size)) for t in query.tokens]
    if isinstance(query, (list, tuple)) and query and isinstance(query[0], TokenSeq):
        lengths = {len(q) for q in query}
        if len(lengths) != 1:
            raise ValueError("batched queries must share one length")
        toks = np.array([q.tokens for q in query]).T
        return [Value(one_hot(row, vocab_size)) for row in toks]
    if isinstance(query, (list, tuple)) and all(isinstance(c, Value) for c in query):
        return list(query)
    raise TypeError(f"cannot read a query from {type(query).__name__}")


def encode_query(tape: Tape, p: ComprehenderParams, query) -> Value:
    cols = query_columns(query, p.vocab_size)
    if not cols:
        raise ValueError("encode_query: empty query")
    embedded = [embed(tape, p.embed, c) for c in cols]
    return p.projection(tape, bilstm_mean_encode(tape, p.fw, p.bw, embedded))


def encode_regions(tape: Tape, p: ComprehenderParams, feats) -> Value:
    feats = feats if isinstance(feats, Value) else Value(feats)
    if feats.shape[0] != p.dims.feature:
        raise ShapeError(f"encode_regions: feature rows {feats.shape[0]} != {p.dims.feature}")
    return p.visual(tape, feats)


def similarity(tape: Tape, p: ComprehenderParams, scene_feats: np.ndarray, index: int,
               h: Value) -> Value:
    v = encode_regions(tape, p, scene_feats[:, [index]])
    return tape.dot(v, h)


def scene_scores(tape: Tape, p: ComprehenderParams, scene_feats: np.ndarray, h: Value) -> Value:
    """(n_regions, B) similarities of every region of one scene against B queries."""
    v = encode_regions(tape, p, scene_feats)
    return tape.matmul(tape.transpose(v), h)


def batch_scores(tape: Tape, p: ComprehenderParams, feats: np.ndarray, h: Value) -> Value:
    """Similarities when each column has its own scene.

    ``feats`` is (FEATURE_DIM, n_regions, B): slot r of example b is ``feats[:, r, b]``.
    """
    rows = [tape.dot(encode_regions(tape, p, feats[:, r, :]), h) for r in range(feats.shape[1])]
    return tape.concat_rows(*rows)


def _check_targets(scores: Value, targets: Sequence[int]) -> np.ndarray:
    n, B = scores.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != B:
        raise ValueError(f"{t.shape[0]} targets for {B} queries")
    if n < 2:
        raise ValueError("comprehension losses need at least two regions")
    if t.min() < 0 or t.max() >= n:
        raise IndexError(f"target index out of range for {n} regions")
    return t


def softmax_loss_from_scores(tape: Tape, scores: Value, targets: Sequence[int]) -> Value:
    """Mean over queries of -log softmax(s)[target]."""
    t = _check_targets(scores, targets)
    n, B = scores.shape
    picked = tape.sum(tape.mul(tape.log_softmax(scores), Value(one_hot(t, n))))
    return tape.scale(picked, -1.0 / B)


def logistic_loss_from_scores(tape: Tape, scores: Value, targets: Sequence[int]) -> Value:
    """Mean over queries of -log s(s_t) - sum_{i != t} log(1 - s(s_i))."""
    t = _check_targets(scores, targets)
    n, B = scores.shape
    signs = 2.0 * one_hot(t, n) - 1.0
    return tape.scale(tape.sum(tape.log_sigmoid(tape.mul(scores, Value(signs)))), -1.0 / B)


def loss_from_scores(tape: Tape, kind: str, scores: Value, targets: Sequence[int]) -> Value:
    if kind == "softmax":
        return softmax_loss_from_scores(tape, scores, targets)
    if kind == "logistic":
        return logistic_loss_from_scores(tape, scores, targets)
    raise ValueError(f"unknown comprehension loss {kind!r}")


def softmax_loss(tape: Tape, p: ComprehenderParams, scene_feats: np.ndarray, query,
                 target: int) -> Value:
    h = encode_query(tape, p, query)
    return softmax_loss_from_scores(tape, scene_scores(tape, p, scene_feats, h), [target])


def logistic_loss(tape: Tape, p: ComprehenderParams, scene_feats: np.ndarray, query,
                  target: int) -> Value:
    h = encode_query(tape, p, query)
    return logistic_loss_from_scores(tape, scene_scores(tape, p, scene_feats, h), [target])


def comprehension_loss(tape: Tape, p: ComprehenderParams, kind: str, scene_feats: np.ndarray,
                       query, target: int) -> Value:
    h = encode_query(tape, p, query)
    return loss_from_scores(tape, kind, scene_scores(tape, p, scene_feats, h), [target])


def posterior_from_scores(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def comprehend(p: ComprehenderParams, scene_feats: np.ndarray, query) -> tuple[int, np.ndarray]:
    """Most probable region (lowest index on ties) and the posterior over regions."""
    tape = Tape(grad=False)
    h = encode_query(tape, p, query)
    post = posterior_from_scores(scene_scores(tape, p, scene_feats, h).data)[:, 0]
    return int(np.argmax(post)), post


def posteriors(p: ComprehenderParams, scene_feats: np.ndarray,
               queries: Sequence[TokenSeq]) -> np.ndarray:
    """(n_regions, N) posteriors for many queries about one scene, bucketed by length."""
    out = np.zeros((scene_feats.shape[1], len(queries)))
    buckets: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        buckets.setdefault(len(q), []).append(i)
    for _, idx in sorted(buckets.items()):
        tape = Tape(grad=False)
        h = encode_query(tape, p, [queries[i] for i in idx])
        out[:, idx] = posterior_from_scores(scene_scores(tape, p, scene_feats, h).data)
    return out
