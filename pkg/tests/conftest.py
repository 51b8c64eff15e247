"""Shared fixtures: desk models, corpora and small graphs"""
import numpy as np
import pytest

from deltadiff.ir import GraphBuilder, desk_model
from deltadiff.models import OpKind, OptLevel
from deltadiff.optimizer import apply_level
from deltadiff.services.corpus import Corpus, CorpusImage, desk_corpus
from deltadiff.tensor import Tensor


def pytest_configure(config):
    config.addinivalue_line("markers", "timing: depends on wall-clock measurements")


@pytest.fixture(scope="session")
def desk():
    """The bundled 64-image desk corpus (built once per session)"""
    return desk_corpus()


@pytest.fixture(scope="session")
def small_corpus(desk):
    """Every eighth smooth image plus two boundary images"""
    picked = desk.images[:56:8] + desk.images[56:58]
    return Corpus(list(picked), desk.label_names)


@pytest.fixture
def tinynet_a():
    return desk_model("tinynet-A")


@pytest.fixture
def tinynet_b():
    return desk_model("tinynet-B")


@pytest.fixture
def tinynet_c():
    return desk_model("tinynet-C")


@pytest.fixture
def basic_a(tinynet_a):
    return apply_level(tinynet_a, OptLevel.BASIC)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def random_corpus(rng):
    """Four random 16x16 images, labelled 0..3"""
    images = [
        CorpusImage(f"r{i}", Tensor(rng.uniform(0, 255, (1, 3, 16, 16))), i)
        for i in range(4)
    ]
    return Corpus(images, ("a", "b", "c", "d"))


@pytest.fixture
def conv_bn_graph(rng):
    """input -> Conv2D -> BatchNorm -> ReLU -> GlobalAvgPool -> Dense"""
    b = GraphBuilder("conv-bn")
    b.input("x", (1, 3, 6, 6))
    b.add("conv", OpKind.CONV2D, ["x"], {"stride": [1, 1], "padding": "SAME"},
          weight=Tensor(rng.standard_normal((4, 3, 3, 3))), bias=Tensor(rng.standard_normal(4)))
    b.add("bn", OpKind.BATCH_NORM, ["conv"], {"epsilon": 1e-3},
          gamma=Tensor(rng.uniform(0.5, 1.5, 4)), beta=Tensor(rng.standard_normal(4)),
          mean=Tensor(rng.standard_normal(4)), var=Tensor(rng.uniform(0.5, 1.5, 4)))
    b.add("relu", OpKind.RELU, ["bn"])
    b.add("gap", OpKind.GLOBAL_AVG_POOL, ["relu"])
    b.add("fc", OpKind.DENSE, ["gap"], weight=Tensor(rng.standard_normal((5, 4))), bias=Tensor(rng.standard_normal(5)))
    return b.build(["fc"])
