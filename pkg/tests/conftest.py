import numpy as np
import pytest

from adaftr import losses as L
from adaftr.datasets import Batch, GenConfig, synth_generate
from adaftr.model import ModelConfig


def loop_matmul(x, W, b):
    out = np.zeros((len(x), len(b)))
    for i in range(len(x)):
        for j in range(len(b)):
            acc = b[j]
            for t in range(len(W)):
                acc += x[i][t] * W[t][j]
            out[i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_fields():
    return (("f0", 5), ("f1", 4), ("f2", 6))


@pytest.fixture
def micro_model(micro_fields):
    return ModelConfig(backbone="mmoe", embed_dim=4, expert_count=2, expert_dim=8,
                       tower_hidden_sizes=(8, 4), relatedness_hidden_sizes=(8,),
                       fields=micro_fields, seed=3)


@pytest.fixture
def micro_batch(micro_fields):
    r = np.random.default_rng(99)
    feats = np.stack([r.integers(0, c, size=6) for _, c in micro_fields], axis=1)
    y_ctr = np.array([1, 0, 1, 1, 0, 0])
    y_cvr = np.array([1, 0, 0, 1, 0, 0])
    return Batch(np.array([0, 0, 1, 1, 2, 2]), feats, y_ctr, y_cvr)


@pytest.fixture(scope="session")
def small_synth():
    cfg = GenConfig(n_records=3000, n_fields=5, cardinality=20, n_users=100,
                    rho=0.6, ctr_rate=0.3, cvr_rate=0.05)
    return synth_generate(cfg, 11)


@pytest.fixture
def loss_cfg():
    return L.LossConfig(beta=0.5, lam=0.01)
