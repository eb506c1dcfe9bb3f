"""JSON checkpoints that carry their own lineage.

A checkpoint holds every parameter under its dotted name as ``{"shape": [r, c],
"data": [...]}`` (row-major), the model dims, the vocabulary digest, and the
config hash, master seed and data lineage of the run that wrote it. Floats
are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .comprehender import ComprehenderParams
from .generator import GeneratorParams, ModelDims
from .nn import Module

FORMAT = "refex-checkpoint/1"
KINDS = {"generator": GeneratorParams, "comprehender": ComprehenderParams}


class CheckpointError(ValueError):
    pass


def params_to_dict(module: Module) -> dict:
    return {name: {"shape": list(v.data.shape), "data": v.data.reshape(-1).tolist()}
            for name, v in module.named_params()}


def load_params(module: Module, params: dict) -> None:
    expected = dict(module.named_params())
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, v in expected.items():
        entry = params[name]
        shape = tuple(entry["shape"])
        if shape != v.data.shape:
            raise CheckpointError(f"{name}: shape {shape} != {v.data.shape}")
        v.data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)


def model_kind(module: Module) -> str:
    for kind, cls in KINDS.items():
        if isinstance(module, cls):
            return kind
    raise CheckpointError(f"cannot checkpoint {type(module).__name__}")


def save(path, module: Module, *, model: str, config: dict, config_hash: str, master_seed: int,
         data_lineage: str, vocab_hash: str, metrics: dict | None = None) -> None:
    dims = module.dims
    doc = {
        "format": FORMAT,
        "model": model,
        "kind": model_kind(module),
        "vocab_size": module.vocab_size,
        "dims": {"embed": dims.embed, "hidden": dims.hidden, "visual": dims.visual,
                 "feature": dims.feature},
        "config": config,
        "config_hash": config_hash,
        "master_seed": master_seed,
        "data_lineage": data_lineage,
        "vocab_hash": vocab_hash,
        "metrics": metrics or {},
        "params": params_to_dict(module),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{p} is not valid JSON: {e}") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{p} is not a {FORMAT} file")
    return doc


def build(doc: dict) -> Module:
    """Instantiate the module described by a checkpoint document."""
    cls = KINDS.get(doc.get("kind"))
    if cls is None:
        raise CheckpointError(f"unknown checkpoint kind {doc.get('kind')!r}")
    module = cls(doc["vocab_size"], ModelDims(**doc["dims"]), np.random.default_rng(0))
    load_params(module, doc["params"])
    return module


def load(path, kind: str | None = None, *, vocab_hash: str | None = None,
         data_lineage: str | None = None) -> tuple[Module, dict]:
    """Read and rebuild a checkpoint, refusing mismatched kinds or lineages."""
    doc = read(path)
    if kind is not None and doc["kind"] != kind:
        raise CheckpointError(f"{path} holds a {doc['kind']}, expected a {kind}")
    if vocab_hash is not None and doc["vocab_hash"] != vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash {doc['vocab_hash']} does not match "
                              f"the dataset's {vocab_hash}")
    if data_lineage is not None and doc["data_lineage"] != data_lineage:
        raise CheckpointError(f"{path}: data lineage {doc['data_lineage']} does not match "
                              f"the dataset's {data_lineage}")
    return build(doc), doc
