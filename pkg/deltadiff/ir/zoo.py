"""Bundled Desk Models

Three miniature image classifiers with deterministic seeded parameters:

* tinynet-A: plain conv stack with batch norm and a dense head
* tinynet-B: parallel branches joined by a channel concat
* tinynet-C: residual blocks with a strided 1x1 projection

All take a 1x3x16x16 input and produce 10 class logits. The dense head of each
model is fitted to the desk images: its rows are k-means centroids of the
standardized trunk features, so the models split the desk images over many
classes instead of collapsing onto one.
"""
from functools import lru_cache
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2

from ..errors import ConfigError
from ..models import OpKind, PreprocessSpec
from ..tensor import Tensor
from .graph import GraphBuilder, ModelGraph

INPUT_SHAPE = (1, 3, 16, 16)
NUM_CLASSES = 10
DESK_LABELS = (
    "apple", "bicycle", "cloud", "dolphin", "elm",
    "fox", "guitar", "harbor", "iris", "jeep",
)
DESK_PREPROCESS = PreprocessSpec(
    scale=1.0 / 255.0,
    mean=[0.5, 0.5, 0.5],
    std=[0.25, 0.25, 0.25],
    size=(16, 16),
)
MODEL_SEEDS = {"tinynet-A": 101, "tinynet-B": 202, "tinynet-C": 303}
DESK_SEED = 7
DESK_SMOOTH_IMAGES = 56
# floor on per-feature spread so near-constant features do not dominate the head
_MIN_FEATURE_STD = 0.1
_KMEANS_ITERATIONS = 20


class _Init:
    """Seeded parameter initializer"""

    def __init__(self, seed: int):
        self.rng = np.random.Generator(np.random.Philox(seed))

    def conv(self, k: int, c: int, r: int = 3, s: int = 3) -> Tensor:
        std = np.sqrt(2.0 / (c * r * s))
        return Tensor(self.rng.standard_normal((k, c, r, s)) * std)

    def bias(self, n: int, scale: float = 0.05) -> Tensor:
        return Tensor(self.rng.standard_normal(n) * scale)

    def bn(self, c: int) -> Dict[str, Tensor]:
        return {
            "gamma": Tensor(1.0 + 0.1 * self.rng.standard_normal(c)),
            "beta": Tensor(0.1 * self.rng.standard_normal(c)),
            "mean": Tensor(0.1 * self.rng.standard_normal(c)),
            "var": Tensor(self.rng.uniform(0.5, 1.5, c)),
        }

    def scale(self, c: int) -> Tensor:
        return Tensor(self.rng.uniform(0.5, 1.5, c))


def _builder(name: str) -> GraphBuilder:
    b = GraphBuilder(name, labels=DESK_LABELS, preprocess=DESK_PREPROCESS)
    b.input("input", INPUT_SHAPE)
    return b


def _conv(b: GraphBuilder, init: _Init, node_id: str, src: str, c: int, k: int,
          size: int = 3, stride: int = 1, bias: bool = True) -> str:
    return b.add(
        node_id, OpKind.CONV2D, [src],
        {"stride": [stride, stride], "padding": "SAME"},
        weight=init.conv(k, c, size, size),
        bias=init.bias(k) if bias else None,
    )


def _bn(b: GraphBuilder, init: _Init, node_id: str, src: str, c: int) -> str:
    return b.add(node_id, OpKind.BATCH_NORM, [src], {"epsilon": 1e-3, "axis": 1}, **init.bn(c))


def _smooth_image(rng: np.random.Generator) -> np.ndarray:
    """Sum of a few low-frequency plane waves per channel, in [0, 255]"""
    _, c, h, w = INPUT_SHAPE
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    image = np.empty((1, c, h, w), dtype=np.float64)
    for channel in range(c):
        plane = np.full((h, w), rng.uniform(60.0, 200.0))
        for _ in range(3):
            fy, fx = rng.uniform(-0.6, 0.6, 2)
            plane += rng.uniform(10.0, 60.0) * np.sin(fy * ii + fx * jj + rng.uniform(0, 2 * np.pi))
        image[0, channel] = plane
    return np.clip(image, 0.0, 255.0).astype(np.float32)


@lru_cache(maxsize=None)
def desk_images(seed: int = DESK_SEED, count: int = DESK_SMOOTH_IMAGES) -> Tuple[np.ndarray, ...]:
    """The smooth raw images of the desk corpus, drawn in order from one Philox stream"""
    rng = np.random.Generator(np.random.Philox(seed))
    images = tuple(_smooth_image(rng) for _ in range(count))
    for image in images:
        image.flags.writeable = False
    return images


def _trunk_features(trunk: ModelGraph) -> np.ndarray:
    from ..backends import get_backend

    engine = get_backend(trunk)
    mean = np.asarray(DESK_PREPROCESS.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(DESK_PREPROCESS.std, dtype=np.float32)[None, :, None, None]
    rows = []
    for raw in desk_images():
        x = (raw * np.float32(DESK_PREPROCESS.scale) - mean) / std
        rows.append(engine.execute(Tensor(x)).flat().astype(np.float64))
    return np.stack(rows)


def _fitted_head(b: GraphBuilder, src: str) -> str:
    """Dense layer scoring each class by closeness to a k-means centroid

    With standardized features ``z = (f - mu) / s`` and centroid ``p`` the score
    ``p . z - |p|^2 / 2`` ranks classes exactly like ``-|z - p|^2``, so the
    head is a nearest-centroid classifier over the desk images.
    """
    features = _trunk_features(b.build([src]))
    mu = features.mean(axis=0)
    spread = features.std(axis=0)
    spread = np.maximum(spread, _MIN_FEATURE_STD * max(float(spread.mean()), np.finfo(np.float32).tiny))
    z = (features - mu) / spread

    # farthest-point seeding keeps k-means deterministic
    chosen = [int(np.argmax(np.linalg.norm(z, axis=1)))]
    nearest = np.linalg.norm(z - z[chosen[0]], axis=1)
    while len(chosen) < NUM_CLASSES:
        chosen.append(int(np.argmax(nearest)))
        nearest = np.minimum(nearest, np.linalg.norm(z - z[chosen[-1]], axis=1))
    centroids, _ = kmeans2(z, z[chosen], iter=_KMEANS_ITERATIONS, minit="matrix")

    weight = centroids / spread
    bias = -(centroids * mu / spread).sum(axis=1) - 0.5 * (centroids ** 2).sum(axis=1)
    return b.add("fc", OpKind.DENSE, [src], weight=Tensor(weight), bias=Tensor(bias))


@lru_cache(maxsize=None)
def tinynet_a(seed: int = MODEL_SEEDS["tinynet-A"]) -> ModelGraph:
    init = _Init(seed)
    b = _builder("tinynet-A")
    x = _conv(b, init, "conv1", "input", 3, 8)
    x = _bn(b, init, "conv1_bn", x, 8)
    x = b.add("conv1_relu", OpKind.RELU, [x])
    x = b.add("pool1", OpKind.MAX_POOL, [x], {"kernel": [2, 2], "stride": [2, 2], "padding": "VALID"})
    x = b.add("pool1_scale", OpKind.SCALE_CHANNELS, [x], {"axis": 1}, scale=init.scale(8))
    x = _conv(b, init, "conv2", x, 8, 16)
    x = b.add("conv2_relu", OpKind.RELU, [x])
    x = b.add("pool2", OpKind.MAX_POOL, [x], {"kernel": [2, 2], "stride": [2, 2], "padding": "VALID"})
    x = _conv(b, init, "conv3", x, 16, 32)
    x = _bn(b, init, "conv3_bn", x, 32)
    x = b.add("conv3_relu", OpKind.RELU, [x])
    gap = b.add("gap", OpKind.GLOBAL_AVG_POOL, [x])
    flat = b.add("gap_flatten", OpKind.RESHAPE, [gap], {"shape": [1, 32]})
    return b.build([_fitted_head(b, flat)])


@lru_cache(maxsize=None)
def tinynet_b(seed: int = MODEL_SEEDS["tinynet-B"]) -> ModelGraph:
    init = _Init(seed)
    b = _builder("tinynet-B")
    x = _conv(b, init, "stem", "input", 3, 8)
    x = b.add("stem_relu", OpKind.RELU, [x])
    stem = b.add("stem_pool", OpKind.MAX_POOL, [x], {"kernel": [2, 2], "stride": [2, 2], "padding": "VALID"})

    b1 = _conv(b, init, "mix_1x1", stem, 8, 4, size=1)
    b1 = b.add("mix_1x1_relu", OpKind.RELU, [b1])

    b2 = _conv(b, init, "mix_3x3_reduce", stem, 8, 4, size=1)
    b2 = b.add("mix_3x3_reduce_relu", OpKind.RELU, [b2])
    b2 = _conv(b, init, "mix_3x3", b2, 4, 4)
    b2 = b.add("mix_3x3_relu", OpKind.RELU, [b2])

    b3 = _conv(b, init, "mix_wide", stem, 8, 4, size=3)
    b3 = b.add("mix_wide_relu", OpKind.RELU, [b3])

    b4 = b.add("mix_pool", OpKind.AVG_POOL, [stem], {"kernel": [3, 3], "stride": [1, 1], "padding": "SAME"})
    b4 = _conv(b, init, "mix_pool_proj", b4, 8, 4, size=1)
    b4 = b.add("mix_pool_proj_relu", OpKind.RELU, [b4])

    x = b.add("mix_concat", OpKind.CONCAT, [b1, b2, b3, b4], {"axis": 1})
    x = _bn(b, init, "mix_bn", x, 16)
    x = b.add("mix_relu", OpKind.RELU, [x])
    gap = b.add("gap", OpKind.GLOBAL_AVG_POOL, [x])
    return b.build([_fitted_head(b, gap)])


@lru_cache(maxsize=None)
def tinynet_c(seed: int = MODEL_SEEDS["tinynet-C"]) -> ModelGraph:
    init = _Init(seed)
    b = _builder("tinynet-C")
    x = _conv(b, init, "stem", "input", 3, 8, bias=False)
    x = _bn(b, init, "stem_bn", x, 8)
    x = b.add("stem_relu", OpKind.RELU, [x])
    x = b.add("stem_pool", OpKind.MAX_POOL, [x], {"kernel": [2, 2], "stride": [2, 2], "padding": "VALID"})

    # identity block
    y = _conv(b, init, "res1_a", x, 8, 8, bias=False)
    y = _bn(b, init, "res1_a_bn", y, 8)
    y = b.add("res1_a_relu", OpKind.RELU, [y])
    y = _conv(b, init, "res1_b", y, 8, 8, bias=False)
    y = _bn(b, init, "res1_b_bn", y, 8)
    y = b.add("res1_add", OpKind.ADD, [y, x])
    x = b.add("res1_relu", OpKind.RELU, [y])

    # downsampling block with projection shortcut
    y = _conv(b, init, "res2_a", x, 8, 16, stride=2, bias=False)
    y = _bn(b, init, "res2_a_bn", y, 16)
    y = b.add("res2_a_relu", OpKind.RELU, [y])
    y = _conv(b, init, "res2_b", y, 16, 16, bias=False)
    y = _bn(b, init, "res2_b_bn", y, 16)
    proj = _conv(b, init, "res2_proj", x, 8, 16, size=1, stride=2)
    y = b.add("res2_add", OpKind.ADD, [y, proj])
    x = b.add("res2_relu", OpKind.RELU, [y])
    gap = b.add("gap", OpKind.GLOBAL_AVG_POOL, [x])
    return b.build([_fitted_head(b, gap)])


DESK_MODELS: Dict[str, Callable[..., ModelGraph]] = {
    "tinynet-A": tinynet_a,
    "tinynet-B": tinynet_b,
    "tinynet-C": tinynet_c,
}


def desk_model(name: str, seed: Optional[int] = None) -> ModelGraph:
    """Build a bundled model by name"""
    try:
        factory = DESK_MODELS[name]
    except KeyError:
        raise ConfigError(f"Unknown desk model: {name} (choose from {sorted(DESK_MODELS)})")
    return factory() if seed is None else factory(seed)
