import numpy as np
import pytest

from soupstock.weightstore import WeightMap

# Shapes used by the random-map fixtures; mixed ranks, including a scalar.
DEFAULT_SHAPES = {
    "bias": (3,),
    "embed.weight": (4, 2),
    "head.w": (2, 2, 2),
    "scale": (),
}


def random_weightmap(rng: np.random.Generator, shapes=None, low=-1.0, high=1.0) -> WeightMap:
    shapes = shapes or DEFAULT_SHAPES
    return WeightMap(
        {name: rng.uniform(low, high, size=shape).astype(np.float32) for name, shape in shapes.items()}
    )


def random_weightmaps(seed: int, count: int, shapes=None, low=-1.0, high=1.0) -> list[WeightMap]:
    rng = np.random.default_rng(seed)
    return [random_weightmap(rng, shapes, low, high) for _ in range(count)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
