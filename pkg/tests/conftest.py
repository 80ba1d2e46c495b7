"""Shared desk-scale fixtures: the synthetic dataset and three trained models.

The models are trained once per session with an identical schedule (same
batch size, epochs, learning-rate decays and iterations per epoch):

* ``joint``: lambda = 0.5, p = 3, m = 3
* ``class_ra``: lambda = 1, p = 3, m = 3
* ``class_uniform``: lambda = 1, p = 3, m = 1
"""

import time

import pytest

from multigrain.data import synth_dataset
from multigrain.gem import GemConfig
from multigrain.model import TrunkConfig
from multigrain.objectives import MarginState
from multigrain.train import TrainConfig, train

DESK_ITERATIONS = 63  # ceil(2 * 1000 / 32): two passes of uniform sampling per epoch
DESK_RUNS = {"joint": (0.5, 3), "class_ra": (1.0, 3), "class_uniform": (1.0, 1)}


@pytest.fixture(scope="session")
def desk_dataset():
    return synth_dataset(n_classes=20, per_class=50, size=64, seed=0)


def _desk_config(lam, m):
    return TrainConfig(epochs=30, lr=0.05, decay_epochs=(20, 26), batch_size=32, m=m, lam=lam,
                       iterations=DESK_ITERATIONS, resolution=32, dtype="float32", seed=0)


@pytest.fixture(scope="session")
def desk_run(desk_dataset):
    """Train a named desk model on first request; returns (TrainResult, seconds)."""
    cache = {}

    def get(name):
        if name not in cache:
            lam, m = DESK_RUNS[name]
            start = time.perf_counter()
            res = train(desk_dataset, TrunkConfig(), _desk_config(lam, m), GemConfig(p=3.0), MarginState())
            cache[name] = (res, time.perf_counter() - start)
        return cache[name]

    return get


@pytest.fixture(scope="session")
def joint_model(desk_run):
    return desk_run("joint")[0].model
