import json
import math

import numpy as np
import pytest

from refex.comprehender import ComprehenderParams, comprehend
from refex.evaluation import (
    ModelJudge,
    OracleJudge,
    RerankConfig,
    bleu_n,
    build_report,
    clipped_counts,
    combine_scores,
    comprehension_accuracy,
    corpus_bleu,
    draw_candidates,
    generate_and_rerank,
    greedy_outputs,
    iou,
    is_hit_by_iou,
    perplexity,
    rerank_outputs,
    rerank_score,
    select,
)
from refex.generator import GeneratorParams, ModelDims, sample_decode_batch
from refex.training import Corpus, Item
from refex.vocab import COLORS, TokenSeq, Vocab
from refex.world import generate_splits, oracle_expression

from conftest import TINY_DIMS, TINY_VOCAB, TinyCorpus, tiny_instance

A, EOS = TINY_VOCAB.index["a"], TINY_VOCAB.eos


@pytest.fixture(scope="module")
def world():
    vocab = Vocab.default()
    corpus = Corpus(generate_splits(1, 20, 4, 0.0)["test"] + generate_splits(1, 20, 4, 0.0)["train"])
    rng = np.random.default_rng(0)
    gen = GeneratorParams(len(vocab), ModelDims(8, 8, 8), rng)
    comp = ComprehenderParams(len(vocab), ModelDims(8, 8, 8), rng)
    return vocab, corpus, gen, comp


# --- BLEU -------------------------------------------------------------------------


def test_clipped_unigram_precision_hand_count():
    assert clipped_counts("a b a".split(), ["a b c".split()], 1) == (2, 3)
    assert bleu_n("a b a".split(), ["a b c".split()], 1) == pytest.approx(2 / 3)


def test_bleu_identities():
    assert bleu_n("the red circle".split(), ["the red circle".split()], 1) == 1.0
    assert bleu_n("the red circle".split(), ["the red circle".split()], 2) == 1.0
    assert bleu_n("x y".split(), ["a b".split()], 1) == 0.0
    assert bleu_n([], ["a b".split()], 1) == 0.0
    with pytest.raises(ValueError):
        bleu_n("a".split(), [], 1)


def test_bleu2_and_brevity_penalty():
    # unigrams 2/3, bigrams 1/2, equal lengths
    assert bleu_n("a b c".split(), ["a b d".split()], 2) == pytest.approx(math.sqrt(1 / 3))
    # a one-word candidate against a two-word reference: precision 1, penalty exp(1 - 2)
    assert bleu_n(["a"], ["a b".split()], 1) == pytest.approx(math.exp(-1))
    # the closest reference length is used
    assert bleu_n(["a"], ["a b".split(), ["a"]], 1) == 1.0


def test_corpus_bleu_pools_counts():
    cands = ["a b a".split(), "a b c".split()]
    refs = [["a b c".split()], ["a b c".split()]]
    assert corpus_bleu(cands, refs, 1) == pytest.approx(5 / 6)


def test_bleu_on_token_sequences_skips_specials(vocab):
    seq = TokenSeq(tuple(vocab.encode(["the", "red", "circle"])) + (vocab.eos,))
    assert bleu_n(seq, [seq], 2, vocab) == 1.0
    assert bleu_n(seq, ["the red circle".split()], 1, vocab) == 0.0  # ids never equal words


# --- IoU --------------------------------------------------------------------------


def test_iou_cases():
    unit = (0, 0, 1, 1)
    assert iou(unit, unit) == 1.0
    assert iou(unit, (2, 2, 3, 3)) == 0.0
    assert iou(unit, (0, 0, 0.5, 1)) == 0.5
    assert iou((0, 0, 0, 1), (0, 0, 0, 1)) == 1.0
    assert iou((0, 0, 0, 1), unit) == 0.0
    assert is_hit_by_iou(unit, (0, 0, 0.5, 1)) and not is_hit_by_iou(unit, (0, 0, 0.4, 1))


# --- perplexity -------------------------------------------------------------------


def test_uniform_model_perplexity_equals_vocab_size():
    vocab = Vocab(("<pad>", "<bos>", "<eos>") + tuple(f"w{i}" for i in range(22)))
    gen = GeneratorParams(25, TINY_DIMS, np.random.default_rng(0))
    gen.output.W.data[:] = 0
    gen.output.b.data[:] = 0
    rng = np.random.default_rng(1)
    corpus = TinyCorpus([rng.normal(size=(5, 2))])
    corpus.items = [Item(0, 0, TokenSeq((3, 7, vocab.eos))), Item(0, 1, TokenSeq((vocab.eos,)))]
    assert perplexity(gen, corpus, vocab) == pytest.approx(25.0, abs=1e-9)


def test_perplexity_at_least_one(world):
    vocab, corpus, gen, _ = world
    assert perplexity(gen, corpus, vocab) >= 1.0
    with pytest.raises(ValueError):
        perplexity(gen, corpus, vocab, items=[])


# --- judges -----------------------------------------------------------------------


def test_oracle_judge_on_oracle_and_absent_expressions(world):
    vocab, corpus, _, _ = world
    items = corpus.items
    refs = [oracle_expression(corpus.scenes[it.scene_index], it.target, vocab) for it in items]
    assert comprehension_accuracy(corpus, items, refs, OracleJudge(vocab)) == 1.0
    absent = []
    for it in items:
        colors = {r.color for r in corpus.scenes[it.scene_index].regions}
        c = next(c for c in COLORS if c not in colors)
        absent.append(TokenSeq(tuple(vocab.encode(["the", c, "circle"])) + (vocab.eos,)))
    assert comprehension_accuracy(corpus, items, absent, OracleJudge(vocab)) == 0.0


def test_oracle_judge_counts_ambiguity_as_miss(world):
    vocab, corpus, _, _ = world
    it = corpus.items[0]
    vague = TokenSeq((vocab.index["the"], vocab.eos))  # matches every region
    assert not OracleJudge(vocab).hits(corpus, [it], [vague])[0]


def test_model_judge_matches_comprehend(world):
    vocab, corpus, _, comp = world
    items = corpus.items[:40]
    exprs = [it.expression for it in items]
    hits = ModelJudge(comp).hits(corpus, items, exprs)
    for h, it, e in zip(hits, items, exprs):
        assert h == (comprehend(comp, corpus.feats[it.scene_index], e)[0] == it.target)


# --- rerank -----------------------------------------------------------------------


def test_rerank_score_reductions():
    for seed in range(10):
        gen, comp, corpus, item = tiny_instance(seed)
        f = corpus.feats[0]
        for c in (TokenSeq((A, EOS)), TokenSeq((EOS,)), TokenSeq((A, A, EOS))):
            s0 = rerank_score(gen, comp, f, item.target, c, 0.0, TINY_VOCAB)
            s1 = rerank_score(gen, comp, f, item.target, c, 1.0, TINY_VOCAB)
            post = comprehend(comp, f, c)[1][item.target]
            assert s1 == pytest.approx(s0 + math.log(post), abs=1e-12)
            assert s0 <= 0 and s1 <= 0
    with pytest.raises(ValueError):
        rerank_score(gen, comp, f, 0, TokenSeq(()), 1.0, TINY_VOCAB)


def test_selection_prefers_first_on_ties():
    assert select(np.array([-1.0, -0.5, -0.5])) == 1
    assert list(combine_scores(np.array([-1.0]), np.array([-2.0]), 0.5)) == [-2.0]


def test_candidate_scores_agree_with_rerank_score():
    gen, comp, corpus, item = tiny_instance(3)
    cs = draw_candidates(gen, comp, corpus, [item], 20, 3, TINY_VOCAB, np.random.default_rng(0))[0]
    for c, lp, post in zip(cs.candidates, cs.mean_logprob, cs.log_post):
        want = rerank_score(gen, comp, corpus.feats[0], item.target, c, 2.0, TINY_VOCAB)
        assert lp + 2.0 * post == pytest.approx(want, abs=1e-10)


def test_single_candidate_is_the_sample():
    gen, comp, corpus, item = tiny_instance(4)
    cfg = RerankConfig(n_candidates=1, gamma=1.0)
    got = generate_and_rerank(gen, comp, corpus, item, cfg, TINY_VOCAB, np.random.default_rng(7), 3)
    seqs, _ = sample_decode_batch(gen, corpus.target_feats([item]), 3, TINY_VOCAB,
                                  np.random.default_rng(7))
    assert got == seqs[0]


def test_fluency_only_winner_has_best_mean_logprob():
    gen, comp, corpus, item = tiny_instance(5)
    cs = draw_candidates(gen, comp, corpus, [item], 50, 3, TINY_VOCAB, np.random.default_rng(1))[0]
    out = generate_and_rerank(gen, comp, corpus, item, RerankConfig(50, 0.0), TINY_VOCAB,
                              np.random.default_rng(1), 3)
    k = cs.candidates.index(out)
    assert cs.mean_logprob[k] == cs.mean_logprob.max()
    # a huge gamma orders by posterior alone
    out = generate_and_rerank(gen, comp, corpus, item, RerankConfig(50, 1e9), TINY_VOCAB,
                              np.random.default_rng(1), 3)
    assert cs.log_post[cs.candidates.index(out)] == cs.log_post.max()


def test_rerank_config_rejects_bad_values():
    for kw in (dict(n_candidates=0), dict(gamma=-1.0)):
        with pytest.raises(ValueError):
            RerankConfig(**kw)


def test_shared_candidates_across_gammas(world):
    vocab, corpus, gen, comp = world
    items = corpus.items[:10]
    res = rerank_outputs(gen, comp, corpus, items, RerankConfig(8, 1.0), vocab,
                         np.random.default_rng(3), gammas=[0.0, 1.0], chunk_columns=16)
    again = rerank_outputs(gen, comp, corpus, items, RerankConfig(8, 1.0), vocab,
                           np.random.default_rng(3), gammas=[0.0, 1.0], chunk_columns=16)
    assert res[0.0][0] == again[0.0][0] and res[1.0][0] == again[1.0][0]
    for g in (0.0, 1.0):
        assert len(res[g][0]) == 10 and all(s <= 0 for s in res[g][1])


# --- reports ----------------------------------------------------------------------


def test_report_is_repeatable_and_serialises(world):
    vocab, corpus, gen, comp = world
    items = corpus.items[:30]
    outs = greedy_outputs(gen, corpus, items, vocab)
    r1 = build_report("m", "greedy", gen, comp, corpus, items, outs, vocab, comp_independent=comp)
    r2 = build_report("m", "greedy", gen, comp, corpus, items, outs, vocab, comp_independent=comp)
    assert r1.to_json() == r2.to_json() and r1.records_jsonl() == r2.records_jsonl()
    d = json.loads(r1.to_json())
    assert d["n_examples"] == 30 and "records" not in d
    assert d["independent_model_acc"] == d["model_comprehension_acc"]
    recs = [json.loads(line) for line in r1.records_jsonl().splitlines()]
    assert len(recs) == 30
    assert np.mean([r["oracle_hit"] for r in recs]) == d["oracle_comprehension_acc"]
    assert {"scene_id", "target", "text", "model_hit", "oracle_hit"} <= set(recs[0])
