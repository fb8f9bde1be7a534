import numpy as np
import pytest

from repose.kinematics import SkeletonGraph
from repose.model import ReposeConfig, ReposeModel


def toy_skeleton():
    # a 4-node loop with one chord: non-tree, every node has a neighbor
    names = ("right_hip", "left_hip", "right_shoulder", "left_shoulder")
    edges = frozenset({(0, 1), (2, 3), (0, 2), (1, 3), (0, 3)})
    return SkeletonGraph(names, edges, (0, 1, 2, 3), "toy4")


TOY_CONFIG = ReposeConfig(
    K=4,
    input_size=32,
    coarsest_size=8,
    decoupled_channels=4,
    trunk_channels=4,
    trunk_repeat=1,
    head_repeat=1,
    update_conv_blocks=1,
)


@pytest.fixture
def skeleton4():
    return toy_skeleton()


@pytest.fixture
def toy_model():
    def make(dtype=np.float64, seed=0, **overrides):
        cfg = TOY_CONFIG if not overrides else ReposeConfig(**{**TOY_CONFIG.to_dict(), **overrides})
        return ReposeModel(cfg, toy_skeleton(), seed=seed, dtype=dtype)

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
