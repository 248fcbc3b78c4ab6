import numpy as np
import pytest


@pytest.fixture
def numeric_gradient():
    """Central-difference gradient of a scalar function of a flat array."""

    def grad(f, x, eps=1e-6):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for i in range(x.size):
            up = x.copy()
            down = x.copy()
            up[i] += eps
            down[i] -= eps
            out[i] = (f(up) - f(down)) / (2.0 * eps)
        return out

    return grad


@pytest.fixture
def tiny_kv():
    """Raw config for a desk-scale experiment; override keys per test."""

    def build(overrides=None):
        kv = {
            "seed": "5",
            "rounds": "2",
            "strategy": "mixed",
            "attack_every": "0",
            "model.hidden_dims": "16",
            "task.num_classes": "4",
            "task.feature_dim": "8",
            "task.train_per_class": "50",
            "task.test_per_class": "20",
            "partition.num_clients": "4",
            "generation.total_budget": "40",
            "algorithm.local_iters": "20",
            "algorithm.batch_size": "16",
            "algorithm.lr": "0.05",
            "attack.eval_members": "30",
            "attack.eval_nonmembers": "30",
        }
        if overrides:
            kv.update(overrides)
        return kv

    return build
