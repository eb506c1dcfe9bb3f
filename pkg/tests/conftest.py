import numpy as np
import pytest

from refex.autodiff import Value
from refex.comprehender import ComprehenderParams
from refex.generator import GeneratorParams, ModelDims
from refex.training import Item
from refex.vocab import TokenSeq, Vocab

FD_STEP = 1e-4
FD_FLOOR = 1e-3  # denominator floor so entries near zero are judged absolutely


def numeric_grad(f, value: Value, step: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar f() with respect to every entry of value."""
    g = np.zeros_like(value.data)
    for idx in np.ndindex(value.data.shape):
        orig = value.data[idx]
        value.data[idx] = orig + step
        up = f()
        value.data[idx] = orig - step
        down = f()
        value.data[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FD_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def op_inputs(rng, kind):
    """Random operands (and attributes) of the right shapes for one op kind."""
    u = lambda *shape: Value(rng.uniform(-2, 2, size=shape))
    if kind in ("add", "mul", "dot"):
        return [u(3, 2), u(3, 2)], {}
    if kind == "add-bias":
        return [u(3, 4), u(3, 1)], {}
    if kind == "matmul":
        return [u(3, 4), u(4, 2)], {}
    if kind == "concat-rows":
        return [u(2, 2), u(1, 2), u(3, 2)], {}
    if kind == "slice-rows":
        return [u(5, 2)], {"start": 1, "stop": 4}
    if kind == "log":
        return [Value(rng.uniform(0.2, 2, size=(3, 2)))], {}
    if kind == "scale":
        return [u(3, 2)], {"c": float(rng.uniform(-2, 2))}
    return [u(4, 3)], {}


TINY_VOCAB = Vocab(("<pad>", "<bos>", "<eos>", "a"))
TINY_DIMS = ModelDims(embed=3, hidden=4, visual=4, feature=5)


class TinyCorpus:
    """Just enough of Corpus for the loss functions: per-scene feature matrices."""

    def __init__(self, feats):
        self.feats = list(feats)

    def target_feats(self, items):
        return np.stack([self.feats[it.scene_index][:, it.target] for it in items], axis=1)

    def region_feats(self, items):
        return np.stack([self.feats[it.scene_index] for it in items], axis=2)


def tiny_instance(seed: int, scale: float = 1.0, dims: ModelDims = TINY_DIMS):
    """Generator + comprehender on a 4-token vocab and a two-region scene."""
    rng = np.random.default_rng(seed)
    gen = GeneratorParams(len(TINY_VOCAB), dims, rng)
    comp = ComprehenderParams(len(TINY_VOCAB), dims, rng)
    for module in (gen, comp):
        for p in module.params():
            p.data = rng.uniform(-scale, scale, size=p.data.shape)
    corpus = TinyCorpus([rng.normal(size=(dims.feature, 2))])
    a, eos = TINY_VOCAB.index["a"], TINY_VOCAB.eos
    item = Item(0, int(rng.integers(2)), TokenSeq((a, a, eos)))
    return gen, comp, corpus, item


@pytest.fixture
def vocab():
    return Vocab.default()
