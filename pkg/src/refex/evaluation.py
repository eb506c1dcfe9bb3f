"""Generate-and-rerank decoding and the evaluation metrics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .comprehender import (ComprehenderParams, batch_scores, encode_query,
                           posterior_from_scores, posteriors)
from .generator import (GeneratorParams, greedy_decode_batch, sample_decode_batch,
                        sequence_logprobs)
from .training import Corpus, Item
from .vocab import TokenSeq, Vocab
from .world import oracle_comprehend


@dataclass(frozen=True)
class RerankConfig:
    n_candidates: int = 100
    gamma: float = 1.0

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


# --- scoring ----------------------------------------------------------------------


def rerank_score(gen: GeneratorParams, comp: ComprehenderParams, scene_feats: np.ndarray,
                 target: int, candidate: TokenSeq, gamma: float, vocab: Vocab) -> float:
    """Mean token log-probability plus gamma times the log comprehension posterior."""
    if len(candidate) == 0:
        raise ValueError("empty candidate")
    lp, length = sequence_logprobs(gen, scene_feats[:, [target]], [candidate], vocab)[:, 0]
    post = posteriors(comp, scene_feats, [candidate])[target, 0]
    return float(lp / length + gamma * np.log(post))


def combine_scores(mean_logprob: np.ndarray, log_post: np.ndarray, gamma: float) -> np.ndarray:
    return mean_logprob + gamma * log_post


def select(scores: np.ndarray) -> int:
    """Index of the best score; the first drawn wins ties."""
    return int(np.argmax(scores))


@dataclass
class CandidateSet:
    candidates: list[TokenSeq]
    mean_logprob: np.ndarray
    log_post: np.ndarray
    model_choice: np.ndarray  # argmax region per candidate


def model_posteriors(comp: ComprehenderParams, region_feats: np.ndarray,
                     queries: Sequence[TokenSeq]) -> np.ndarray:
    """(n_regions, N) posteriors; column b is scored against ``region_feats[:, :, b]``."""
    out = np.zeros((region_feats.shape[1], len(queries)))
    buckets: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        buckets.setdefault(len(q), []).append(i)
    for _, idx in sorted(buckets.items()):
        tape = Tape(grad=False)
        h = encode_query(tape, comp, [queries[i] for i in idx])
        out[:, idx] = posterior_from_scores(batch_scores(tape, comp, region_feats[:, :, idx], h).data)
    return out


def draw_candidates(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus,
                    items: Sequence[Item], n: int, t_max: int, vocab: Vocab,
                    rng: np.random.Generator) -> list[CandidateSet]:
    """n samples per item with their generator and comprehender scores."""
    feats = np.repeat(corpus.target_feats(items), n, axis=1)
    seqs, dists = sample_decode_batch(gen, feats, t_max, vocab, rng)
    logp = np.zeros(len(seqs))
    for b, s in enumerate(seqs):
        logp[b] = sum(math.log(dists[t][tok, b]) for t, tok in enumerate(s.tokens))
    lengths = np.array([len(s) for s in seqs], dtype=float)
    region = np.repeat(corpus.region_feats(items), n, axis=2)
    post = model_posteriors(comp, region, seqs)
    out = []
    for k, it in enumerate(items):
        sl = slice(k * n, (k + 1) * n)
        p = post[:, sl]
        out.append(CandidateSet(seqs[sl], logp[sl] / lengths[sl],
                                np.log(np.maximum(p[it.target], 1e-300)), p.argmax(axis=0)))
    return out


def generate_and_rerank(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus,
                        item: Item, cfg: RerankConfig, vocab: Vocab, rng: np.random.Generator,
                        t_max: int = 10) -> TokenSeq:
    cs = draw_candidates(gen, comp, corpus, [item], cfg.n_candidates, t_max, vocab, rng)[0]
    return cs.candidates[select(combine_scores(cs.mean_logprob, cs.log_post, cfg.gamma))]


# --- metrics ----------------------------------------------------------------------


def iou(b1: Sequence[float], b2: Sequence[float]) -> float:
    ax0, ay0, ax1, ay1 = b1
    bx0, by0, bx1, by1 = b2
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a == 0.0 or area_b == 0.0:
        return 1.0 if area_a == area_b == 0.0 and tuple(b1) == tuple(b2) else 0.0
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def is_hit_by_iou(chosen_bbox, truth_bbox, threshold: float = 0.5) -> bool:
    return iou(chosen_bbox, truth_bbox) >= threshold


def _words(seq, vocab: Vocab | None) -> list:
    if isinstance(seq, TokenSeq):
        specials = {vocab.pad, vocab.bos, vocab.eos} if vocab else set()
        return [t for t in seq.tokens if t not in specials]
    return list(seq)


def _ngrams(words: Sequence, n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def clipped_counts(candidate: Sequence, references: Sequence[Sequence], n: int) -> tuple[int, int]:
    """(clipped matches, total candidate n-grams) for one sentence."""
    cand = _ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in _ngrams(ref, n).items():
            max_ref[g] = max(max_ref[g], c)
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, sum(cand.values())


def corpus_bleu(candidates: Sequence, references: Sequence[Sequence], n: int,
                vocab: Vocab | None = None) -> float:
    """Corpus BLEU-n: clipped precisions, uniform geometric mean, brevity penalty.

    Candidates and references may be TokenSeqs (special tokens dropped) or
    word lists; ``references[k]`` is the list of references for candidate k.
    """
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if len(refs) == 0:
            raise ValueError("every candidate needs at least one reference")
        c = _words(cand, vocab)
        rs = [_words(r, vocab) for r in refs]
        cand_len += len(c)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        for k in range(1, n + 1):
            m, t = clipped_counts(c, rs, k)
            matched[k - 1] += m
            total[k - 1] += t
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


def bleu_n(candidate, references: Sequence, n: int, vocab: Vocab | None = None) -> float:
    return corpus_bleu([candidate], [references], n, vocab)


def perplexity(gen: GeneratorParams, corpus: Corpus, vocab: Vocab,
               items: Sequence[Item] | None = None, expressions: Sequence[TokenSeq] | None = None) -> float:
    """exp of the mean over examples of per-token negative log-likelihood."""
    return float(np.exp(mean_nll(gen, corpus, vocab, items, expressions).mean()))


def mean_nll(gen: GeneratorParams, corpus: Corpus, vocab: Vocab,
             items: Sequence[Item] | None = None,
             expressions: Sequence[TokenSeq] | None = None) -> np.ndarray:
    items = list(corpus.items if items is None else items)
    if not items:
        raise ValueError("perplexity needs a nonempty dataset")
    exprs = [it.expression for it in items] if expressions is None else list(expressions)
    lp = sequence_logprobs(gen, corpus.target_feats(items), exprs, vocab)
    return -lp[0] / lp[1]


class OracleJudge:
    name = "oracle"

    def __init__(self, vocab: Vocab):
        self.vocab = vocab

    def hits(self, corpus: Corpus, items: Sequence[Item], expressions: Sequence[TokenSeq]) -> np.ndarray:
        return np.array([
            oracle_comprehend(corpus.scenes[it.scene_index], e, self.vocab) == {it.target}
            for it, e in zip(items, expressions)
        ], dtype=bool)


class ModelJudge:
    name = "model"

    def __init__(self, comp: ComprehenderParams):
        self.comp = comp

    def hits(self, corpus: Corpus, items: Sequence[Item], expressions: Sequence[TokenSeq]) -> np.ndarray:
        out = np.zeros(len(items), dtype=bool)
        groups: dict[int, list[int]] = {}
        for k, it in enumerate(items):
            groups.setdefault(corpus.feats[it.scene_index].shape[1], []).append(k)
        for _, idx in groups.items():
            region = corpus.region_feats([items[k] for k in idx])
            post = model_posteriors(self.comp, region, [expressions[k] for k in idx])
            out[idx] = post.argmax(axis=0) == np.array([items[k].target for k in idx])
        return out


def comprehension_accuracy(corpus: Corpus, items: Sequence[Item], expressions: Sequence[TokenSeq],
                           judge) -> float:
    if not items:
        return 0.0
    return float(judge.hits(corpus, items, expressions).mean())


# --- reports ----------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    mode: str
    n_examples: int
    model_comprehension_acc: float
    oracle_comprehension_acc: float
    bleu_1: float
    bleu_2: float
    mean_log_perplexity: float
    reference_perplexity: float
    independent_model_acc: float | None = None
    judge_agreement: float | None = None
    extra: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)

    def records_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _references(corpus: Corpus, items: Sequence[Item], vocab: Vocab) -> list[list[TokenSeq]]:
    from .world import oracle_expression
    return [[oracle_expression(corpus.scenes[it.scene_index], it.target, vocab)] for it in items]


def build_report(method: str, mode: str, gen: GeneratorParams, comp: ComprehenderParams,
                 corpus: Corpus, items: Sequence[Item], outputs: Sequence[TokenSeq], vocab: Vocab,
                 comp_independent: ComprehenderParams | None = None,
                 scores: Sequence[float] | None = None) -> EvalReport:
    model_hits = ModelJudge(comp).hits(corpus, items, outputs)
    oracle_hits = OracleJudge(vocab).hits(corpus, items, outputs)
    indep_hits = ModelJudge(comp_independent).hits(corpus, items, outputs) if comp_independent else None
    refs = _references(corpus, items, vocab)
    out_nll = mean_nll(gen, corpus, vocab, items, outputs)
    ref_nll = mean_nll(gen, corpus, vocab, items, [r[0] for r in refs])
    records = []
    for k, (it, seq) in enumerate(zip(items, outputs)):
        rec = {"scene_id": corpus.scenes[it.scene_index].scene_id, "target": it.target,
               "text": vocab.text(seq.tokens), "tokens": list(seq.tokens),
               "reference": vocab.text(refs[k][0].tokens),
               "model_hit": bool(model_hits[k]), "oracle_hit": bool(oracle_hits[k]),
               "nll": float(out_nll[k])}
        if indep_hits is not None:
            rec["independent_hit"] = bool(indep_hits[k])
        if scores is not None:
            rec["score"] = float(scores[k])
        records.append(rec)
    return EvalReport(
        method=method, mode=mode, n_examples=len(items),
        model_comprehension_acc=float(model_hits.mean()),
        oracle_comprehension_acc=float(oracle_hits.mean()),
        bleu_1=corpus_bleu(outputs, refs, 1, vocab),
        bleu_2=corpus_bleu(outputs, refs, 2, vocab),
        mean_log_perplexity=float(out_nll.mean()),
        reference_perplexity=float(np.exp(ref_nll.mean())),
        independent_model_acc=None if indep_hits is None else float(indep_hits.mean()),
        judge_agreement=float((model_hits == oracle_hits).mean()),
        records=records,
    )


def greedy_outputs(gen: GeneratorParams, corpus: Corpus, items: Sequence[Item], vocab: Vocab,
                   t_max: int = 10, chunk: int = 1024) -> list[TokenSeq]:
    out: list[TokenSeq] = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        out.extend(greedy_decode_batch(gen, corpus.target_feats(part), t_max, vocab))
    return out


def rerank_outputs(gen: GeneratorParams, comp: ComprehenderParams, corpus: Corpus,
                   items: Sequence[Item], cfg: RerankConfig, vocab: Vocab,
                   rng: np.random.Generator, gammas: Sequence[float] | None = None,
                   t_max: int = 10, chunk_columns: int = 2000):
    """Winners for each gamma from one shared candidate draw per item.

    Returns {gamma: (outputs, scores)}. gamma = 0 is the pick-lowest-perplexity
    baseline.
    """
    gammas = [cfg.gamma] if gammas is None else list(gammas)
    result = {g: ([], []) for g in gammas}
    per_chunk = max(1, chunk_columns // cfg.n_candidates)
    for start in range(0, len(items), per_chunk):
        part = items[start:start + per_chunk]
        for cs in draw_candidates(gen, comp, corpus, part, cfg.n_candidates, t_max, vocab, rng):
            for g in gammas:
                sc = combine_scores(cs.mean_logprob, cs.log_post, g)
                k = select(sc)
                result[g][0].append(cs.candidates[k])
                result[g][1].append(float(sc[k]))
    return result
