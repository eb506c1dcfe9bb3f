"""Synthetic scenes of attributed regions, their referring expressions and
an exact symbolic comprehension oracle."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .vocab import COLORS, SHAPES, SIZES, TokenSeq, Vocab

# (low, high) area per size class; class thresholds are 0.04 and 0.12
AREA_RANGES = {"small": (0.01, 0.035), "medium": (0.05, 0.10), "large": (0.14, 0.25)}
SMALL_MAX, MEDIUM_MAX = 0.04, 0.12
MAX_REJECTIONS = 1000
FEATURE_DIM = 2 * (len(COLORS) + len(SHAPES) + len(SIZES)) + 5

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seeds(master: int, count: int) -> list[int]:
    """Independent per-item seeds from one master seed (splitmix64 stream)."""
    out, state = [], master & _MASK64
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        out.append(splitmix64(state) >> 1)
    return out


class WorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class Region:
    color: str
    shape: str
    size: str
    bbox: tuple[float, float, float, float]

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2, (y0 + y1) / 2

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)

    @property
    def quadrant(self) -> tuple[str, str]:
        cx, cy = self.center
        return ("left" if cx < 0.5 else "right", "top" if cy < 0.5 else "bottom")

    def key(self) -> tuple:
        return (self.color, self.shape, self.size, self.quadrant)

    def to_dict(self) -> dict:
        return {"color": self.color, "shape": self.shape, "size": self.size, "bbox": list(self.bbox)}

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(d["color"], d["shape"], d["size"], tuple(float(v) for v in d["bbox"]))


@dataclass(frozen=True)
class Scene:
    regions: tuple[Region, ...]
    scene_id: int
    rng_seed: int

    def __len__(self) -> int:
        return len(self.regions)


def size_class(area: float) -> str:
    if area < SMALL_MAX:
        return "small"
    if area < MEDIUM_MAX:
        return "medium"
    return "large"


def _sample_region(rng: np.random.Generator) -> Region:
    color = COLORS[rng.integers(len(COLORS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    size = SIZES[rng.integers(len(SIZES))]
    lo, hi = AREA_RANGES[size]
    area = rng.uniform(lo, hi)
    aspect = rng.uniform(0.7, 1.4)
    w = np.sqrt(area * aspect)
    h = area / w
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    bbox = tuple(round(float(v), 6) for v in (x0, y0, x0 + w, y0 + h))
    return Region(color, shape, size, bbox)


def sample_scene(rng_seed: int, n_regions: int, scene_id: int = 0) -> Scene:
    """Draw regions until ``n_regions`` are mutually distinguishable."""
    if not 2 <= n_regions <= 10:
        raise ValueError(f"n_regions must be in [2, 10], got {n_regions}")
    rng = np.random.default_rng(rng_seed)
    regions: list[Region] = []
    keys: set[tuple] = set()
    rejections = 0
    while len(regions) < n_regions:
        r = _sample_region(rng)
        if r.key() in keys:
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise WorldError(f"scene {scene_id}: exceeded {MAX_REJECTIONS} rejections")
            continue
        keys.add(r.key())
        regions.append(r)
    return Scene(tuple(regions), scene_id, rng_seed)


# --- expressions and the oracle ---------------------------------------------------


def spatial_phrases(region: Region) -> list[tuple[str, ...]]:
    """Spatial descriptions true of ``region``, in preference order."""
    horiz, vert = region.quadrant
    phrases = [(horiz,), (vert,)]
    cx, cy = region.center
    if 0.3 <= cx <= 0.7 and 0.3 <= cy <= 0.7:
        phrases.append(("middle",))
    phrases.append((vert, horiz))
    return phrases


@dataclass(frozen=True)
class Description:
    """Which optional attributes an expression mentions."""

    shape: str
    color: str | None = None
    size: str | None = None
    spatial: tuple[str, ...] = ()

    def words(self) -> list[str]:
        out = ["the"]
        if self.size:
            out.append(self.size)
        if self.color:
            out.append(self.color)
        out.append(self.shape)
        out.extend(self.spatial)
        return out

    @property
    def n_attr_words(self) -> int:
        return bool(self.color) + bool(self.size) + len(self.spatial)


def _candidates(region: Region) -> list[Description]:
    cands = []
    spatials = [()] + spatial_phrases(region)
    for use_color, use_size in itertools.product((True, False), repeat=2):
        for rank, sp in enumerate(spatials):
            d = Description(region.shape, region.color if use_color else None,
                            region.size if use_size else None, sp)
            cands.append(((d.n_attr_words, not use_color, not use_size, rank), d))
    cands.sort(key=lambda kv: kv[0])
    return [d for _, d in cands]


def _matches(region: Region, words: Iterable[str]) -> bool:
    cx, cy = region.center
    for w in words:
        if w in COLORS:
            if region.color != w:
                return False
        elif w in SHAPES:
            if region.shape != w:
                return False
        elif w in SIZES:
            if region.size != w:
                return False
        elif w == "left":
            if not cx < 0.5:
                return False
        elif w == "right":
            if cx < 0.5:
                return False
        elif w == "top":
            if not cy < 0.5:
                return False
        elif w == "bottom":
            if cy < 0.5:
                return False
        elif w == "middle":
            if not (0.3 <= cx <= 0.7 and 0.3 <= cy <= 0.7):
                return False
    return True


def comprehend_words(scene: Scene, words: Sequence[str]) -> set[int]:
    return {i for i, r in enumerate(scene.regions) if _matches(r, words)}


def oracle_comprehend(scene: Scene, expression: TokenSeq, vocab: Vocab) -> set[int]:
    """All regions consistent with every attribute/spatial word of the expression."""
    return comprehend_words(scene, vocab.decode(expression.tokens))


def minimal_description(scene: Scene, target: int) -> Description:
    if not 0 <= target < len(scene):
        raise IndexError(f"target {target} out of range for {len(scene)} regions")
    region = scene.regions[target]
    for d in _candidates(region):
        if comprehend_words(scene, d.words()) == {target}:
            return d
    raise WorldError(f"scene {scene.scene_id}: region {target} cannot be singled out")


def _to_tokens(d: Description, vocab: Vocab) -> TokenSeq:
    return TokenSeq(tuple(vocab.encode(d.words())) + (vocab.eos,))


def oracle_expression(scene: Scene, target: int, vocab: Vocab) -> TokenSeq:
    """Shortest template expression that singles out ``target``."""
    return _to_tokens(minimal_description(scene, target), vocab)


def ambiguous_expression(scene: Scene, target: int, vocab: Vocab,
                         rng: np.random.Generator) -> TokenSeq | None:
    """The minimal expression with one attribute dropped, or None if it has none."""
    d = minimal_description(scene, target)
    present = [a for a in ("color", "size", "spatial") if getattr(d, a)]
    if not present:
        return None
    drop = present[rng.integers(len(present))]
    d = Description(d.shape, None if drop == "color" else d.color,
                    None if drop == "size" else d.size,
                    () if drop == "spatial" else d.spatial)
    return _to_tokens(d, vocab)


# --- features ---------------------------------------------------------------------


def attribute_vector(region: Region) -> np.ndarray:
    v = np.zeros(len(COLORS) + len(SHAPES) + len(SIZES))
    v[COLORS.index(region.color)] = 1.0
    v[len(COLORS) + SHAPES.index(region.shape)] = 1.0
    v[len(COLORS) + len(SHAPES) + SIZES.index(region.size)] = 1.0
    return v


def region_features(scene: Scene, index: int, sigma: float = 0.05,
                    rng: np.random.Generator | None = None):
    """(object, global context, location) features of one region.

    Noise is fixed per region unless an explicit ``rng`` is given, the same
    way a CNN feature of a given crop would be.
    """
    region = scene.regions[index]
    if rng is None:
        rng = np.random.default_rng([scene.rng_seed, index])
    o = attribute_vector(region)
    if sigma > 0:
        o = o + rng.normal(0.0, sigma, size=o.shape)
    g = np.mean([attribute_vector(r) for r in scene.regions], axis=0)
    x0, y0, x1, y1 = region.bbox
    l = np.array([x0, y0, x1, y1, region.area])
    return o, g, l


def scene_feature_matrix(scene: Scene, sigma: float = 0.05) -> np.ndarray:
    """(FEATURE_DIM, n_regions) matrix whose columns are concat(o, g, l)."""
    cols = [np.concatenate(region_features(scene, i, sigma)) for i in range(len(scene))]
    return np.stack(cols, axis=1)


# --- datasets ---------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotatedExample:
    scene_id: int
    target: int
    expression: TokenSeq
    ambiguous: bool = False


@dataclass
class SceneRecord:
    scene: Scene
    examples: list[AnnotatedExample] = field(default_factory=list)

    def to_json(self, vocab: Vocab) -> str:
        return json.dumps({
            "scene_id": self.scene.scene_id,
            "rng_seed": self.scene.rng_seed,
            "regions": [r.to_dict() for r in self.scene.regions],
            "examples": [
                {"target": e.target, "tokens": list(e.expression.tokens),
                 "text": vocab.text(e.expression.tokens), "ambiguous": e.ambiguous}
                for e in self.examples
            ],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SceneRecord":
        d = json.loads(line)
        scene = Scene(tuple(Region.from_dict(r) for r in d["regions"]), d["scene_id"], d["rng_seed"])
        examples = [AnnotatedExample(scene.scene_id, e["target"], TokenSeq(tuple(e["tokens"])),
                                     e.get("ambiguous", False)) for e in d["examples"]]
        return cls(scene, examples)


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(round(n * f)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    if counts[-1] < 0:
        raise ValueError(f"split fractions {fractions} do not fit {n} scenes")
    return counts


def annotate_scene(scene: Scene, vocab: Vocab, ambiguity: float = 0.0) -> SceneRecord:
    """One example per region; with probability ``ambiguity`` an attribute is dropped."""
    rng = np.random.default_rng([scene.rng_seed, 1])
    record = SceneRecord(scene)
    for target in range(len(scene)):
        expr, amb = oracle_expression(scene, target, vocab), False
        if ambiguity > 0 and rng.random() < ambiguity:
            alt = ambiguous_expression(scene, target, vocab, rng)
            if alt is not None:
                expr, amb = alt, True
        record.examples.append(AnnotatedExample(scene.scene_id, target, expr, amb))
    return record


def generate_splits(seed: int, n_scenes: int, regions_per_scene: int, ambiguity: float,
                    fractions: Sequence[float] = (0.7, 0.1, 0.2),
                    vocab: Vocab | None = None) -> dict[str, list[SceneRecord]]:
    """Deterministic train/val/test scene records; only train gets ambiguity."""
    vocab = vocab or Vocab.default()
    seeds = derive_seeds(seed, n_scenes)
    names = ("train", "val", "test")
    out: dict[str, list[SceneRecord]] = {}
    start = 0
    for name, count in zip(names, split_counts(n_scenes, fractions)):
        amb = ambiguity if name == "train" else 0.0
        out[name] = [
            annotate_scene(sample_scene(seeds[i], regions_per_scene, scene_id=i), vocab, amb)
            for i in range(start, start + count)
        ]
        start += count
    return out


def write_jsonl(path, records: Iterable[SceneRecord], vocab: Vocab) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json(vocab) + "\n")


def read_jsonl(path) -> list[SceneRecord]:
    with open(path) as fh:
        return [SceneRecord.from_json(line) for line in fh if line.strip()]


def iter_examples(records: Sequence[SceneRecord]) -> Iterator[tuple[Scene, AnnotatedExample]]:
    for rec in records:
        for ex in rec.examples:
            yield rec.scene, ex
