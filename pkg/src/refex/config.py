"""Experiment configuration: one JSON document plus command-line overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .evaluation import RerankConfig
from .generator import ModelDims
from .proxy import ProxyConfig
from .training import OptimConfig

SEED_ENV = "REFEX_SEED"
STREAMS = ("world", "init", "training", "sampling")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the CLI exits with status 2."""


@dataclass
class WorldConfig:
    n_scenes: int = 2000
    regions_per_scene: int = 8
    ambiguity: float = 0.3
    sigma: float = 0.05
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class DimsConfig:
    embed: int = 32
    hidden: int = 64
    visual: int = 64

    def model_dims(self) -> ModelDims:
        return ModelDims(embed=self.embed, hidden=self.hidden, visual=self.visual)


@dataclass
class EvalConfig:
    split: str = "test"
    t_max: int = 10
    gamma_sweep: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0)
    held_out_items: int = 500  # val items scored by training-time eval hooks


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    comp_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, epochs=6))
    gen_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, epochs=30,
                                                                       lr_floor=0.02))
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "out"

    # --- serialisation ---------------------------------------------------------

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = _build(cls, data, "")
        cfg.validate()
        return cfg

    def hash(self) -> str:
        """Digest of everything except where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_lineage(self) -> str:
        """Digest of the inputs that determine the dataset."""
        blob = json.dumps({"master_seed": self.master_seed, "world": self.to_dict()["world"]},
                          sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # --- checks ----------------------------------------------------------------

    def validate(self) -> None:
        w = self.world
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError("master_seed must be a non-negative integer")
        if w.n_scenes < 1:
            raise ConfigError("world.n_scenes must be >= 1")
        if w.regions_per_scene < 2:
            raise ConfigError("world.regions_per_scene must be >= 2")
        if not 0 <= w.ambiguity <= 1:
            raise ConfigError("world.ambiguity must lie in [0, 1]")
        if w.sigma < 0:
            raise ConfigError("world.sigma must be >= 0")
        if len(w.fractions) != 3 or min(w.fractions) < 0 or abs(sum(w.fractions) - 1) > 1e-9:
            raise ConfigError("world.fractions must be three non-negative numbers summing to 1")
        for name in ("embed", "hidden", "visual"):
            if getattr(self.dims, name) < 1:
                raise ConfigError(f"dims.{name} must be positive")
        for name in ("comp_optim", "gen_optim"):
            _check_optim(getattr(self, name), name)
        _check_optim(self.proxy.optim, "proxy.optim")
        try:
            self.proxy.validate()
        except ValueError as e:
            raise ConfigError(f"proxy: {e}") from None
        for name in ("cl_iterations", "eval_every"):
            if getattr(self.proxy, name) < 1:
                raise ConfigError(f"proxy.{name} must be >= 1")
        for name in ("mss", "smixec"):
            if getattr(self.proxy, name).iterations < 1:
                raise ConfigError(f"proxy.{name}.iterations must be >= 1")
        if self.rerank.n_candidates < 1:
            raise ConfigError("rerank.n_candidates must be >= 1")
        if self.rerank.gamma < 0 or any(g < 0 for g in self.eval.gamma_sweep):
            raise ConfigError("rerank gammas must be >= 0")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        if self.eval.t_max < 1 or self.eval.held_out_items < 1:
            raise ConfigError("eval.t_max and eval.held_out_items must be >= 1")

    # --- random streams --------------------------------------------------------

    def seed_for(self, stream: str, *names: str) -> int:
        return stream_seed(self.master_seed, stream, *names)

    def rng(self, stream: str, *names: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(stream, *names))


def _check_optim(o: OptimConfig, where: str) -> None:
    if o.kind not in ("sgd", "adam"):
        raise ConfigError(f"{where}.kind must be 'sgd' or 'adam'")
    if o.lr <= 0 or o.batch_size < 1 or o.epochs < 1:
        raise ConfigError(f"{where}: lr, batch_size and epochs must be positive")
    if not 0 < o.lr_floor <= 1:
        raise ConfigError(f"{where}.lr_floor must lie in (0, 1]")
    if o.max_norm is not None and o.max_norm <= 0:
        raise ConfigError(f"{where}.max_norm must be positive or null")


def stream_seed(master: int, stream: str, *names: str) -> int:
    """Stable 63-bit seed for a named sub-stream of the master seed."""
    if stream not in STREAMS:
        raise ValueError(f"unknown random stream {stream!r}")
    key = "/".join((str(master), stream) + names).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    base = cls()
    for name, value in data.items():
        default = getattr(base, name)
        path = f"{where}{name}"
        if value is None and "None" in str(fields[name].type):
            kwargs[name] = None
        elif dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path + ".")
        else:
            kwargs[name] = _coerce(default, value, path)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _coerce(default, value, path: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = tuple(float(v) for v in value) if ok else value
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` where value is JSON, or a bare string if it is not valid JSON."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = node[part] = {}
            node = nxt
        node[path[-1]] = value
    return data


def load_config(path: str | os.PathLike | None = None, overrides=(), seed: int | None = None,
                env=None) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``--set`` overrides, then REFEX_SEED, then ``seed``."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
    merged = ExperimentConfig().to_dict()
    _merge(merged, data)
    merged = apply_overrides(merged, overrides)
    if env.get(SEED_ENV) not in (None, ""):
        try:
            merged["master_seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if seed is not None:
        merged["master_seed"] = seed
    return ExperimentConfig.from_dict(merged)


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
