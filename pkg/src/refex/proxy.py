"""Training the generator through a frozen comprehender.

The comprehender reads the generator's per-step word distributions instead of
one-hot tokens, so its loss is differentiable in the generator parameters.
Three schedules use that signal: compound loss (teacher forced), modified
scheduled sampling (per-iteration Bernoulli dispatch between cross-entropy
and fully sampled comprehension steps), and SMIXEC (ground-truth prefix of
stochastic length followed by a sampled suffix).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Optimizer, Tape, Value
from .comprehender import (ComprehenderParams, LOSS_KINDS, batch_scores, encode_query,
                           loss_from_scores, scene_scores)
from .generator import (GeneratorParams, SoftBatch, SoftSeq, soft_sequence_batch, teacher_forced,
                        xent_from_steps)
from .training import (Corpus, Item, OptimConfig, batch_stream, checksum, compound_loss_batch,
                       train_generator)
from .vocab import Vocab

log = logging.getLogger(__name__)

INF = math.inf


class FrozenModelError(RuntimeError):
    pass


@dataclass
class MssConfig:
    k: float = 1.0
    c: float | None = None  # None: reach the floor halfway through
    epsilon_min: float = 0.25
    iterations: int = 1000

    def slope(self) -> float:
        if self.c is not None:
            return self.c
        return (self.k - self.epsilon_min) / max(1.0, self.iterations / 2)


@dataclass
class SmixecConfig:
    p: float = 0.5
    T: int = 10
    d: int | None = None  # None: base step hits 0 halfway through
    iterations: int = 1000
    lambda_sm: float = 1.0

    def period(self) -> int:
        if self.d is not None:
            return self.d
        return max(1, self.iterations // (2 * self.T))


@dataclass
class ProxyConfig:
    lam: float = 1.0
    loss_kind: str = "softmax"
    mss: MssConfig = field(default_factory=MssConfig)
    smixec: SmixecConfig = field(default_factory=SmixecConfig)
    cl_iterations: int = 1000
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-4))
    eval_every: int = 500

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}")
        m, s = self.mss, self.smixec
        if not 0 <= m.k <= 1:
            raise ValueError("mss.k must lie in [0, 1]")
        if not 0 <= m.epsilon_min <= m.k:
            raise ValueError("mss.epsilon_min must lie in [0, k]")
        if m.slope() < 0:
            raise ValueError("mss.c must be >= 0")
        if not 0 <= s.p <= 1:
            raise ValueError("smixec.p must lie in [0, 1]")
        if s.T < 1 or s.period() < 1:
            raise ValueError("smixec.T and smixec.d must be >= 1")


# --- schedules --------------------------------------------------------------------


def mss_epsilon(i: int, k: float, c: float, epsilon_min: float) -> float:
    return max(epsilon_min, k - c * i)


def smixec_base(i: int, T: int, d: int) -> int:
    return max(0, T - (-(-i // d)))


def geometric_sample(rng: np.random.Generator, p: float):
    """Delta s with P(k) = (1-p)^k p on {0, 1, ...}; p = 0 gives ``math.inf``."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 1:
        return 0
    if p == 0:
        return INF
    return int(rng.geometric(p)) - 1


@dataclass
class ScheduleState:
    iteration: int
    epsilon: float | None = None
    alpha: int | None = None
    s: int | None = None
    delta_s: float | None = None
    s_i: int | None = None


def mss_schedule(cfg: MssConfig, rng: np.random.Generator) -> Iterator[ScheduleState]:
    c = cfg.slope()
    for i in range(1, cfg.iterations + 1):
        eps = mss_epsilon(i, cfg.k, c, cfg.epsilon_min)
        alpha = int(rng.random() < eps)
        yield ScheduleState(i, epsilon=eps, alpha=alpha)


def smixec_schedule(cfg: SmixecConfig, rng: np.random.Generator) -> Iterator[ScheduleState]:
    d = cfg.period()
    for i in range(1, cfg.iterations + 1):
        s = smixec_base(i, cfg.T, d)
        ds = geometric_sample(rng, cfg.p)
        s_i = cfg.T if ds == INF else min(cfg.T, s + ds)
        yield ScheduleState(i, s=s, delta_s=ds, s_i=int(s_i))


# --- losses -----------------------------------------------------------------------


def comprehension_loss_on(tape: Tape, comp: ComprehenderParams, kind: str, scene_feats: np.ndarray,
                          soft: SoftSeq, target: int) -> Value:
    h = encode_query(tape, comp, soft)
    return loss_from_scores(tape, kind, scene_scores(tape, comp, scene_feats, h), [target])


def compound_loss(tape: Tape, gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus,
                  item: Item, lam: float, vocab: Vocab, loss_kind: str = "softmax") -> Value:
    """L_gen + lam * L_com for a single example, both from one teacher-forced pass."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    total, _, _ = compound_loss_batch(tape, gen, comp, corpus, [item], vocab, lam, loss_kind)
    return total


# --- training loops ---------------------------------------------------------------


@dataclass
class ProxyResult:
    log: list[dict]
    comp_checksum_before: str
    comp_checksum_after: str


def _guard_frozen(comp: ComprehenderParams, before: str) -> str:
    after = checksum(comp)
    if after != before:
        raise FrozenModelError("comprehender parameters changed during proxy training")
    return after


def _zero(params: Sequence[Value]) -> None:
    for p in params:
        p.zero_grad()


EvalHook = Callable[[int], dict]


def cl_train(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus, vocab: Vocab,
             cfg: ProxyConfig, rng: np.random.Generator, on_eval: EvalHook | None = None) -> ProxyResult:
    """Compound-loss fine-tuning with teacher-forced minibatches."""
    cfg.validate()
    before = checksum(comp)

    def epoch_hook(epoch, ppl):
        return on_eval(epoch) if on_eval else {}

    rows = train_generator(gen, corpus, vocab, cfg.optim, rng, iterations=cfg.cl_iterations,
                           comp=comp, lam=cfg.lam, loss_kind=cfg.loss_kind, on_epoch=epoch_hook)
    for r in rows:
        r["schedule_value"] = cfg.lam
    return ProxyResult(rows, before, _guard_frozen(comp, before))


def soft_batch_loss(tape: Tape, comp: ComprehenderParams, kind: str, corpus: Corpus,
                    items: Sequence[Item], sb: SoftBatch) -> Value:
    """Batch-mean comprehension loss over soft sequences of mixed lengths."""
    B = len(items)
    feats = corpus.region_feats(items)
    parts = []
    for idx, cols in sb.groups(tape):
        h = encode_query(tape, comp, cols)
        scores = batch_scores(tape, comp, feats[:, :, idx], h)
        loss = loss_from_scores(tape, kind, scores, [items[j].target for j in idx])
        parts.append(tape.scale(loss, len(idx) / B))
    return tape.add_n(parts)


def mss_train(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus, vocab: Vocab,
              cfg: ProxyConfig, rng: np.random.Generator, t_max: int = 10,
              on_eval: EvalHook | None = None) -> ProxyResult:
    """Modified scheduled sampling: per iteration either a cross-entropy step on
    a ground-truth minibatch (probability eps_i) or a comprehension-loss step on
    fully sampled sequences for that minibatch."""
    cfg.validate()
    before = checksum(comp)
    comp_params = comp.params()
    opt = Optimizer(gen.params(), cfg.optim.kind, cfg.optim.lr, cfg.optim.max_norm)
    sched_rng, data_rng, sample_rng = rng.spawn(3)
    batches = batch_stream(corpus, cfg.optim.batch_size, data_rng)
    rows = []
    for st in mss_schedule(cfg.mss, sched_rng):
        _, items = next(batches)
        opt.lr = cfg.optim.lr_at(st.iteration, cfg.mss.iterations)
        exprs = [it.expression for it in items]
        tape = Tape()
        if st.alpha == 1:
            steps = teacher_forced(tape, gen, corpus.target_feats(items), exprs, vocab)
            loss = xent_from_steps(tape, steps, exprs, gen.vocab_size)
            branch, kind, sampled = "ground-truth", "xent", 0
        else:
            sb = soft_sequence_batch(tape, gen, corpus.target_feats(items), vocab, sample_rng,
                                     t_max=t_max)
            loss = soft_batch_loss(tape, comp, cfg.loss_kind, corpus, items, sb)
            branch, kind, sampled = "sampled", cfg.loss_kind, float(sb.lengths.mean())
        tape.backward(loss)
        _zero(comp_params)
        opt.step()
        row = {"iteration": st.iteration, "schedule_value": st.epsilon, "branch": branch,
               "loss_kind": kind, "loss": loss.item(), "held_out_acc": "",
               "alpha": st.alpha, "sampled_steps": sampled}
        if on_eval and (st.iteration % cfg.eval_every == 0 or st.iteration == cfg.mss.iterations):
            row.update(on_eval(st.iteration))
        rows.append(row)
    return ProxyResult(rows, before, _guard_frozen(comp, before))


def smixec_loss(tape: Tape, gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus,
                items: Sequence[Item], s_i: int, vocab: Vocab, cfg: ProxyConfig,
                rng: np.random.Generator, t_max: int = 10):
    """L_com + lambda_sm * L_gen where the first s_i positions are one-hot ground truth.

    ``items`` must share one expression length. Returns (loss, batch, l_gen, l_com).
    """
    exprs = [it.expression for it in items]
    sb = soft_sequence_batch(tape, gen, corpus.target_feats(items), vocab, rng, exprs, s_i, t_max)
    l_gen = None
    if sb.n_fixed > 0:
        l_gen = xent_from_steps(tape, sb.steps, exprs, gen.vocab_size, n_steps=sb.n_fixed)
    l_com = soft_batch_loss(tape, comp, cfg.loss_kind, corpus, items, sb)
    loss = l_com if l_gen is None else tape.add(l_com, tape.scale(l_gen, cfg.smixec.lambda_sm))
    return loss, sb, l_gen, l_com


def smixec_train(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus, vocab: Vocab,
                 cfg: ProxyConfig, rng: np.random.Generator, t_max: int = 10,
                 on_eval: EvalHook | None = None) -> ProxyResult:
    cfg.validate()
    before = checksum(comp)
    comp_params = comp.params()
    opt = Optimizer(gen.params(), cfg.optim.kind, cfg.optim.lr, cfg.optim.max_norm)
    sched_rng, data_rng, sample_rng = rng.spawn(3)
    batches = batch_stream(corpus, cfg.optim.batch_size, data_rng)
    rows = []
    for st in smixec_schedule(cfg.smixec, sched_rng):
        _, items = next(batches)
        opt.lr = cfg.optim.lr_at(st.iteration, cfg.smixec.iterations)
        tape = Tape()
        loss, sb, l_gen, l_com = smixec_loss(tape, gen, comp, corpus, items, st.s_i, vocab, cfg,
                                             sample_rng, t_max)
        tape.backward(loss)
        _zero(comp_params)
        opt.step()
        sampled = float((sb.lengths - sb.n_fixed).mean())
        row = {"iteration": st.iteration, "schedule_value": st.s_i, "branch": "mixed",
               "loss_kind": f"{cfg.loss_kind}+xent", "loss": loss.item(), "held_out_acc": "",
               "base_step": st.s, "delta_s": st.delta_s, "sampled_steps": sampled}
        if on_eval and (st.iteration % cfg.eval_every == 0 or st.iteration == cfg.smixec.iterations):
            row.update(on_eval(st.iteration))
        rows.append(row)
    return ProxyResult(rows, before, _guard_frozen(comp, before))
