"""The stages behind the command-line interface.

Every stage reads its inputs from the output directory and writes into a
fresh stage directory (``<out>/<stage>``, or a timestamped sibling when that
already exists and ``overwrite`` is off). Downstream stages pick the most
recent completed directory of each prerequisite.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import checkpoint
from .comprehender import ComprehenderParams
from .config import ConfigError, ExperimentConfig
from .evaluation import (EvalReport, ModelJudge, OracleJudge, RerankConfig, build_report,
                         comprehension_accuracy, corpus_bleu, greedy_outputs, perplexity,
                         rerank_outputs, _references)
from .generator import GeneratorParams
from .proxy import cl_train, mss_train, smixec_train
from .training import Corpus, train_comprehender, train_generator
from .vocab import Vocab
from .world import generate_splits, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
COMP_MODELS = ("comp", "comp-independent")
GEN_MODELS = ("gen-mle", "proxy-cl", "proxy-mss", "proxy-smixec")
MODELS = COMP_MODELS + GEN_MODELS
EVAL_MODES = ("greedy", "rerank", "sample")
LOG_COLUMNS = ("iteration", "schedule_value", "branch", "loss_kind", "loss", "held_out_acc")
DATA_FORMAT = "refex-dataset/1"


class MissingPrerequisite(RuntimeError):
    """An upstream artifact is absent; the CLI exits with status 3."""

    def __init__(self, what: str, command: str):
        super().__init__(f"missing {what}; run `refex {command}` first")
        self.command = command


class LineageError(ConfigError):
    """Artifacts from different configurations or datasets were combined."""


# --- workspace --------------------------------------------------------------------


class Workspace:
    def __init__(self, root, overwrite: bool = False, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.overwrite = overwrite
        self.clock = clock

    def new_stage(self, stage: str) -> Path:
        base = self.root / stage
        try:
            if base.exists() and self.overwrite:
                shutil.rmtree(base)
            if not base.exists():
                base.mkdir(parents=True)
                return base
            stamp = time.strftime("%Y%m%d-%H%M%S", time.localtime(self.clock()))
            path, k = self.root / f"{stage}-{stamp}", 1
            while path.exists():
                path, k = self.root / f"{stage}-{stamp}-{k}", k + 1
            path.mkdir(parents=True)
            return path
        except OSError as e:
            raise ConfigError(f"cannot write output directory {self.root}: {e}") from None

    def find_stage(self, stage: str, marker: str) -> Path | None:
        """Most recent directory for ``stage`` holding ``marker``."""
        candidates = [self.root / stage] + sorted(self.root.glob(f"{stage}-2*"))
        done = [c for c in candidates if (c / marker).is_file()]
        return done[-1] if done else None


# --- data -------------------------------------------------------------------------


@dataclass
class Dataset:
    path: Path
    manifest: dict
    vocab: Vocab
    records: dict

    def corpus(self, split: str) -> Corpus:
        return Corpus(self.records[split], self.manifest["world"]["sigma"])


def gen_data(cfg: ExperimentConfig, ws: Workspace) -> Path:
    w = cfg.world
    vocab = Vocab.default()
    splits = generate_splits(cfg.seed_for("world"), w.n_scenes, w.regions_per_scene, w.ambiguity,
                             w.fractions, vocab)
    out = ws.new_stage("data")
    for name in SPLITS:
        write_jsonl(out / f"{name}.jsonl", splits[name], vocab)
    (out / "vocab.json").write_text(vocab.to_json() + "\n")
    manifest = {
        "format": DATA_FORMAT,
        "master_seed": cfg.master_seed,
        "config_hash": cfg.hash(),
        "data_lineage": cfg.data_lineage(),
        "vocab_hash": vocab.digest(),
        "world": cfg.to_dict()["world"],
        "scenes": {name: len(splits[name]) for name in SPLITS},
        "examples": {name: sum(len(r.examples) for r in splits[name]) for name in SPLITS},
        "ambiguous_train_examples": sum(e.ambiguous for r in splits["train"] for e in r.examples),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"wrote {sum(manifest['scenes'].values())} scenes "
          f"({', '.join(f'{k} {v}' for k, v in manifest['scenes'].items())}) to {out}")
    return out


def load_data(cfg: ExperimentConfig, ws: Workspace, path=None) -> Dataset:
    root = Path(path) if path is not None else ws.find_stage("data", "manifest.json")
    if root is None or not (root / "manifest.json").is_file():
        raise MissingPrerequisite("dataset", "gen-data")
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATA_FORMAT:
        raise LineageError(f"{root} is not a {DATA_FORMAT} directory")
    if manifest["data_lineage"] != cfg.data_lineage():
        raise LineageError(f"dataset in {root} was generated with a different seed or world "
                           f"config (lineage {manifest['data_lineage']}, config gives "
                           f"{cfg.data_lineage()})")
    vocab = Vocab.from_json((root / "vocab.json").read_text())
    if vocab.digest() != manifest["vocab_hash"]:
        raise LineageError(f"{root}/vocab.json does not match the manifest's vocabulary hash")
    records = {name: read_jsonl(root / f"{name}.jsonl") for name in SPLITS}
    return Dataset(root, manifest, vocab, records)


# --- logs -------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_log(path: Path, rows: Sequence[dict]) -> None:
    extras = sorted({k for r in rows for k in r} - set(LOG_COLUMNS))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS + tuple(extras))
    for r in rows:
        w.writerow([_cell(r.get(k)) for k in LOG_COLUMNS + tuple(extras)])
    path.write_text(buf.getvalue())


# --- checkpoints ------------------------------------------------------------------


def _save(cfg: ExperimentConfig, data: Dataset, out: Path, module, model: str, metrics: dict):
    echo = cfg.to_dict()
    echo.pop("output_dir")  # where a run writes must not change what it writes
    checkpoint.save(out / "checkpoint.json", module, model=model, config=echo,
                    config_hash=cfg.hash(), master_seed=cfg.master_seed,
                    data_lineage=data.manifest["data_lineage"],
                    vocab_hash=data.manifest["vocab_hash"], metrics=metrics)
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")


def _train_hint(model: str) -> str:
    return f"train --model {model}"


def resolve_checkpoint(ws: Workspace, ref: str, default_model: str) -> Path:
    """A checkpoint path, a stage directory, or a model name under the output dir."""
    ref = ref or default_model
    p = Path(ref)
    if p.is_file():
        return p
    if p.is_dir() and (p / "checkpoint.json").is_file():
        return p / "checkpoint.json"
    if ref in MODELS:
        found = ws.find_stage(ref, "checkpoint.json")
        if found is None:
            raise MissingPrerequisite(f"{ref} checkpoint", _train_hint(ref))
        return found / "checkpoint.json"
    raise MissingPrerequisite(f"checkpoint {ref}", _train_hint(default_model))


def load_model(ws: Workspace, data: Dataset, ref: str, default_model: str, kind: str):
    path = resolve_checkpoint(ws, ref, default_model)
    try:
        return checkpoint.load(path, kind, vocab_hash=data.manifest["vocab_hash"],
                               data_lineage=data.manifest["data_lineage"])
    except checkpoint.CheckpointError as e:
        raise LineageError(str(e)) from None


# --- training ---------------------------------------------------------------------


def _held_out(cfg: ExperimentConfig, val: Corpus):
    return val.items[:cfg.eval.held_out_items]


def train(cfg: ExperimentConfig, ws: Workspace, model: str) -> Path:
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
    data = load_data(cfg, ws)
    vocab = data.vocab
    dims = cfg.dims.model_dims()
    train_c, val_c = data.corpus("train"), data.corpus("val")
    held = _held_out(cfg, val_c)
    held_exprs = [it.expression for it in held]
    t0 = time.perf_counter()

    if model in COMP_MODELS:
        comp = ComprehenderParams(len(vocab), dims, cfg.rng("init", model))

        def comp_epoch(epoch):
            return {"held_out_acc": comprehension_accuracy(val_c, held, held_exprs, ModelJudge(comp)),
                    "epoch": epoch}

        rows = train_comprehender(comp, train_c, cfg.comp_optim, cfg.rng("training", model),
                                  cfg.proxy.loss_kind, on_epoch=comp_epoch)
        metrics = {"held_out_acc": rows[-1]["held_out_acc"]}
        module = comp
    elif model == "gen-mle":
        gen = GeneratorParams(len(vocab), dims, cfg.rng("init", model))
        oracle = OracleJudge(vocab)

        def gen_epoch(epoch, train_ppl):
            outs = greedy_outputs(gen, val_c, held, vocab, cfg.eval.t_max)
            return {"epoch": epoch, "val_ppl": perplexity(gen, val_c, vocab, held),
                    "held_out_acc": float(oracle.hits(val_c, held, outs).mean())}

        rows = train_generator(gen, train_c, vocab, cfg.gen_optim, cfg.rng("training", model),
                               on_epoch=gen_epoch)
        last = rows[-1]
        metrics = {"val_ppl": last["val_ppl"], "train_ppl": last["train_ppl"],
                   "held_out_oracle_acc": last["held_out_acc"]}
        module = gen
    else:
        comp, _ = load_model(ws, data, "comp", "comp", "comprehender")
        gen, _ = load_model(ws, data, "gen-mle", "gen-mle", "generator")
        mle, _ = load_model(ws, data, "gen-mle", "gen-mle", "generator")  # frozen snapshot
        judge, oracle = ModelJudge(comp), OracleJudge(vocab)

        def proxy_eval(iteration):
            outs = greedy_outputs(gen, val_c, held, vocab, cfg.eval.t_max)
            # fluency alarm: how plausible the current outputs look to the MLE model
            return {"held_out_acc": float(judge.hits(val_c, held, outs).mean()),
                    "held_out_oracle_acc": float(oracle.hits(val_c, held, outs).mean()),
                    "fluency_ppl": perplexity(mle, val_c, vocab, held, outs)}

        mle_outs = greedy_outputs(mle, val_c, held, vocab, cfg.eval.t_max)
        baseline_fluency = perplexity(mle, val_c, vocab, held, mle_outs)

        fn = {"proxy-cl": cl_train, "proxy-mss": mss_train, "proxy-smixec": smixec_train}[model]
        kwargs = {} if model == "proxy-cl" else {"t_max": cfg.eval.t_max}
        result = fn(gen, comp, train_c, vocab, cfg.proxy, cfg.rng("training", model),
                    on_eval=proxy_eval, **kwargs)
        rows = result.log
        if "held_out_acc" not in rows[-1] or rows[-1]["held_out_acc"] == "":
            rows[-1].update(proxy_eval(len(rows)))
        metrics = {"held_out_acc": rows[-1]["held_out_acc"],
                   "held_out_oracle_acc": rows[-1]["held_out_oracle_acc"],
                   "fluency_ppl": rows[-1]["fluency_ppl"], "mle_fluency_ppl": baseline_fluency,
                   "comp_checksum_before": result.comp_checksum_before,
                   "comp_checksum_after": result.comp_checksum_after,
                   "val_ppl": perplexity(gen, val_c, vocab, held)}
        module = gen

    out = ws.new_stage(model)
    _save(cfg, data, out, module, model, metrics)
    write_log(out / "log.csv", rows)
    shown = ", ".join(f"{k} {v:.4f}" for k, v in sorted(metrics.items()) if isinstance(v, float))
    print(f"trained {model} in {time.perf_counter() - t0:.1f}s; {shown}; wrote {out}")
    return out


# --- evaluation -------------------------------------------------------------------


def _sweep_row(corpus: Corpus, items, outputs, comp, vocab) -> dict:
    refs = _references(corpus, items, vocab)
    return {"model_comprehension_acc": float(ModelJudge(comp).hits(corpus, items, outputs).mean()),
            "oracle_comprehension_acc": float(OracleJudge(vocab).hits(corpus, items, outputs).mean()),
            "bleu_1": corpus_bleu(outputs, refs, 1, vocab)}


def evaluate(cfg: ExperimentConfig, ws: Workspace, mode: str, gen_ref: str | None = None,
             comp_ref: str | None = None, independent_ref: str | None = None) -> EvalReport:
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {', '.join(EVAL_MODES)}")
    data = load_data(cfg, ws)
    vocab = data.vocab
    gen, gen_doc = load_model(ws, data, gen_ref, "gen-mle", "generator")
    comp, comp_doc = load_model(ws, data, comp_ref, "comp", "comprehender")
    indep = None
    if independent_ref:
        indep, _ = load_model(ws, data, independent_ref, "comp-independent", "comprehender")
    method = gen_doc["model"]
    corpus = data.corpus(cfg.eval.split)
    items = corpus.items
    extra = {"split": cfg.eval.split, "generator": method, "comprehender": comp_doc["model"],
             "config_hash": cfg.hash(), "data_lineage": data.manifest["data_lineage"],
             "generator_config_hash": gen_doc["config_hash"]}
    scores = None
    if mode == "greedy":
        outputs = greedy_outputs(gen, corpus, items, vocab, cfg.eval.t_max)
    else:
        gamma = cfg.rerank.gamma if mode == "rerank" else 0.0
        rcfg = RerankConfig(cfg.rerank.n_candidates, gamma)
        gammas = sorted({gamma, 0.0, *cfg.eval.gamma_sweep}) if mode == "rerank" else [0.0]
        # the sampling stream ignores the mode, so rerank and sample score the same candidates
        rng = cfg.rng("sampling", "candidates", method, cfg.eval.split)
        result = rerank_outputs(gen, comp, corpus, items, rcfg, vocab, rng, gammas, cfg.eval.t_max)
        outputs, scores = result[gamma]
        extra.update({"n_candidates": rcfg.n_candidates, "gamma": gamma})
        if mode == "rerank":
            extra["gamma_sweep"] = {repr(g): _sweep_row(corpus, items, result[g][0], comp, vocab)
                                    for g in gammas}
    report = build_report(method, mode, gen, comp, corpus, items, outputs, vocab,
                          comp_independent=indep, scores=scores)
    report.extra.update(extra)
    out = ws.new_stage(f"eval-{method}-{mode}")
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "records.jsonl").write_text(report.records_jsonl())
    print(format_table([report.summary()]))
    print(f"wrote {out}")
    return report


# --- reporting --------------------------------------------------------------------

_METHOD_ORDER = {m: i for i, m in enumerate(GEN_MODELS)}
_MODE_ORDER = {m: i for i, m in enumerate(EVAL_MODES)}


def format_table(rows: Sequence[dict]) -> str:
    head = (f"{'method':<14}{'mode':<8}{'acc-model':>10}{'acc-oracle':>11}{'bleu-1':>8}"
            f"{'bleu-2':>8}{'ppl':>8}")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<14}{r['mode']:<8}{r['model_comprehension_acc']:>10.4f}"
                     f"{r['oracle_comprehension_acc']:>11.4f}{r['bleu_1']:>8.4f}"
                     f"{r['bleu_2']:>8.4f}{r['reference_perplexity']:>8.3f}")
    return "\n".join(lines)


def collect_reports(root) -> list[dict]:
    """Latest report per eval stage under ``root``, in a stable method/mode order."""
    root = Path(root)
    latest: dict[str, Path] = {}
    for p in sorted(root.glob("eval-*/report.json")):
        d = p.parent.name
        for mode in EVAL_MODES:
            marker = f"-{mode}"
            if marker in d:
                key = d[:d.index(marker) + len(marker)]
                latest[key] = p  # sorted order: timestamped siblings come later
                break
    rows = [json.loads(p.read_text()) for p in latest.values()]
    rows.sort(key=lambda r: (_MODE_ORDER.get(r["mode"], 9), _METHOD_ORDER.get(r["method"], 9),
                             r["method"]))
    return rows


def report(root, ws: Workspace | None = None) -> list[dict]:
    root = Path(root)
    if not root.is_dir():
        raise MissingPrerequisite(f"output directory {root}", "pipeline")
    rows = collect_reports(root)
    if not rows:
        raise MissingPrerequisite(f"evaluation reports under {root}", "eval")
    ws = ws or Workspace(root)
    out = ws.new_stage("report")
    (out / "summary.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    table = format_table(rows)
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return rows


def run_all(cfg: ExperimentConfig, ws: Workspace,
            models: Sequence[str] = ("comp",) + GEN_MODELS) -> list[dict]:
    """gen-data, the listed models in dependency order, evaluation, report."""
    gen_data(cfg, ws)
    for m in MODELS:
        if m in models:
            train(cfg, ws, m)
    indep = "comp-independent" if "comp-independent" in models else None
    for m in GEN_MODELS:
        if m in models:
            evaluate(cfg, ws, "greedy", m, "comp", indep)
    if "gen-mle" in models:
        evaluate(cfg, ws, "rerank", "gen-mle", "comp", indep)
        evaluate(cfg, ws, "sample", "gen-mle", "comp", indep)
    return report(ws.root, ws)
