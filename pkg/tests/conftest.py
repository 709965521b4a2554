import numpy as np
import pytest

from config.settings import Config
from src.logging_setup import close_audit_log
from src.sim_config import SimConfig, build_config


@pytest.fixture(autouse=True)
def _isolated_dirs(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "LOG_DIR", tmp_path / "logs")
    monkeypatch.setattr(Config, "OUTPUT_DIR", tmp_path / "runs")
    yield
    close_audit_log()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_raw(**overrides) -> dict:
    """A six-node, two-cluster label-shift experiment that runs in well under a second."""
    raw = {
        "method": "ppdl",
        "K": 6,
        "M": 2,
        "T": 6,
        "layout": {"cluster_sizes": [3, 3], "shift": "labels", "label_subsets": [[0, 1], [2, 3]]},
        "task": {"classes": 4, "dim": 4, "samples_per_node": 40},
        "local_epochs": 1,
        "batch_size": 8,
        "seed": 3,
    }
    raw.update(overrides)
    return raw


@pytest.fixture
def make_config():
    def factory(**overrides) -> SimConfig:
        return build_config(small_raw(**overrides))
    return factory


def two_cluster_raw(**overrides) -> dict:
    """K=20, M=2, labels split 12/8, T=150; mirrors config/experiments/label_shift_2clusters.yaml."""
    raw = {
        "method": "ppdl",
        "K": 20,
        "M": 2,
        "T": 150,
        # each cluster's classes sit a quarter turn from the other's, so a foreign model votes for the wrong pair
        "layout": {"cluster_sizes": [12, 8], "shift": "labels", "label_subsets": [[0, 2], [1, 3]]},
        "task": {"classes": 4, "dim": 16, "samples_per_node": 300, "sigma": 6.0},
        "local_epochs": 1,
        "lr": 0.02,
        "reward_after_training": False,
        # every played arm counts as significant over the whole run
        "significance_divisor": 171,
    }
    raw.update(overrides)
    return raw
