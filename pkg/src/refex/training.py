"""Corpus handling and the supervised training loops (generator MLE,
compound loss, comprehender)."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Optimizer, Tape
from .comprehender import ComprehenderParams, batch_scores, encode_query, loss_from_scores
from .generator import GeneratorParams, teacher_forced, xent_from_steps
from .nn import Module
from .vocab import TokenSeq, Vocab
from .world import Scene, SceneRecord, scene_feature_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Item:
    scene_index: int
    target: int
    expression: TokenSeq
    ambiguous: bool = False


class Corpus:
    """Scenes with precomputed feature matrices and their annotated examples."""

    def __init__(self, records: Sequence[SceneRecord], sigma: float = 0.05):
        self.scenes: list[Scene] = [r.scene for r in records]
        self.feats: list[np.ndarray] = [scene_feature_matrix(s, sigma) for s in self.scenes]
        self.items: list[Item] = [
            Item(i, ex.target, ex.expression, ex.ambiguous)
            for i, rec in enumerate(records) for ex in rec.examples
        ]

    def __len__(self) -> int:
        return len(self.items)

    def target_feats(self, items: Sequence[Item]) -> np.ndarray:
        return np.stack([self.feats[it.scene_index][:, it.target] for it in items], axis=1)

    def region_feats(self, items: Sequence[Item]) -> np.ndarray:
        """(FEATURE_DIM, n_regions, B); items must come from equally sized scenes."""
        return np.stack([self.feats[it.scene_index] for it in items], axis=2)


def make_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> list[list[Item]]:
    """Shuffled minibatches bucketed by (expression length, scene size): no padding."""
    buckets: dict[tuple[int, int], list[Item]] = {}
    for it in corpus.items:
        key = (len(it.expression), corpus.feats[it.scene_index].shape[1])
        buckets.setdefault(key, []).append(it)
    batches = []
    for key in sorted(buckets):
        items = buckets[key]
        order = rng.permutation(len(items))
        for start in range(0, len(items), batch_size):
            batches.append([items[j] for j in order[start:start + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[j] for j in order]


def batch_stream(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[int, list[Item]]]:
    """Endless (epoch, batch) stream, reshuffled each epoch."""
    epoch = 0
    while True:
        for batch in make_batches(corpus, batch_size, rng):
            yield epoch, batch
        epoch += 1


def checksum(module: Module) -> str:
    h = hashlib.sha256()
    for name, v in module.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v.data).tobytes())
    return h.hexdigest()


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 10
    max_norm: float | None = 5.0
    lr_floor: float = 1.0  # fraction of lr reached at the last step; linear decay

    def lr_at(self, i: int, total: int) -> float:
        """Learning rate for step i of total (1-based)."""
        frac = (i - 1) / max(1, total - 1)
        return self.lr * (1.0 - (1.0 - self.lr_floor) * frac)


def compound_loss_batch(tape: Tape, gen: GeneratorParams, comp: ComprehenderParams | None,
                        corpus: Corpus, items: Sequence[Item], vocab: Vocab, lam: float,
                        loss_kind: str = "softmax"):
    """Teacher-forced L_gen + lam * L_com for an equal-length batch.

    Returns (total, L_gen, L_com); L_com is None when lam == 0, in which case
    the total is exactly L_gen.
    """
    exprs = [it.expression for it in items]
    steps = teacher_forced(tape, gen, corpus.target_feats(items), exprs, vocab)
    l_gen = xent_from_steps(tape, steps, exprs, gen.vocab_size)
    if lam == 0 or comp is None:
        return l_gen, l_gen, None
    h = encode_query(tape, comp, [s.probs(tape) for s in steps])
    scores = batch_scores(tape, comp, corpus.region_feats(items), h)
    l_com = loss_from_scores(tape, loss_kind, scores, [it.target for it in items])
    return tape.add(l_gen, tape.scale(l_com, lam)), l_gen, l_com


def train_generator(gen: GeneratorParams, corpus: Corpus, vocab: Vocab, cfg: OptimConfig,
                    rng: np.random.Generator, iterations: int | None = None,
                    comp: ComprehenderParams | None = None, lam: float = 0.0,
                    loss_kind: str = "softmax",
                    on_epoch: Callable[[int, float], dict] | None = None) -> list[dict]:
    """Minibatch training of the generator on L_gen (+ lam * L_com).

    Runs ``iterations`` minibatch steps, or ``cfg.epochs`` epochs if None.
    Returns one log row per iteration; ``on_epoch(epoch, train_ppl)`` may add
    held-out metrics to the last row of each epoch.
    """
    opt = Optimizer(gen.params(), cfg.kind, cfg.lr, cfg.max_norm)
    comp_params = comp.params() if comp is not None else []
    per_epoch = len(make_batches(corpus, cfg.batch_size, np.random.default_rng(0)))
    total_iters = iterations if iterations is not None else cfg.epochs * per_epoch
    rows: list[dict] = []
    nll_sum = tok_sum = 0.0
    current_epoch = 0
    stream = batch_stream(corpus, cfg.batch_size, rng)
    for i in range(1, total_iters + 1):
        epoch, batch = next(stream)
        opt.lr = cfg.lr_at(i, total_iters)
        tape = Tape()
        loss, l_gen, l_com = compound_loss_batch(tape, gen, comp, corpus, batch, vocab, lam, loss_kind)
        tape.backward(loss)
        for p in comp_params:
            p.zero_grad()
        opt.step()
        n_tok = len(batch) * len(batch[0].expression)
        nll_sum += l_gen.item() * n_tok
        tok_sum += n_tok
        row = {"iteration": i, "schedule_value": "", "branch": "mle" if l_com is None else "compound",
               "loss_kind": "xent" if l_com is None else f"xent+{loss_kind}",
               "loss": loss.item(), "held_out_acc": ""}
        rows.append(row)
        end_of_epoch = (i % per_epoch == 0) or i == total_iters
        if end_of_epoch:
            train_ppl = float(np.exp(nll_sum / tok_sum))
            row["train_ppl"] = train_ppl
            if on_epoch is not None:
                row.update(on_epoch(current_epoch, train_ppl))
            log.info("generator epoch %d iter %d train ppl %.4f", current_epoch, i, train_ppl)
            nll_sum = tok_sum = 0.0
            current_epoch += 1
    return rows


def train_comprehender(comp: ComprehenderParams, corpus: Corpus, cfg: OptimConfig,
                       rng: np.random.Generator, loss_kind: str = "softmax",
                       on_epoch: Callable[[int], dict] | None = None) -> list[dict]:
    opt = Optimizer(comp.params(), cfg.kind, cfg.lr, cfg.max_norm)
    rows: list[dict] = []
    it = 0
    total = cfg.epochs * len(make_batches(corpus, cfg.batch_size, np.random.default_rng(0)))
    for epoch in range(cfg.epochs):
        for batch in make_batches(corpus, cfg.batch_size, rng):
            it += 1
            opt.lr = cfg.lr_at(it, total)
            tape = Tape()
            h = encode_query(tape, comp, [b.expression for b in batch])
            scores = batch_scores(tape, comp, corpus.region_feats(batch), h)
            loss = loss_from_scores(tape, loss_kind, scores, [b.target for b in batch])
            tape.backward(loss)
            opt.step()
            rows.append({"iteration": it, "schedule_value": "", "branch": "comprehension",
                         "loss_kind": loss_kind, "loss": loss.item(), "held_out_acc": ""})
        if on_epoch is not None:
            rows[-1].update(on_epoch(epoch))
        log.info("comprehender epoch %d loss %.4f", epoch, rows[-1]["loss"])
    return rows
