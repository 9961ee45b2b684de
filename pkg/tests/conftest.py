"""Shared fixtures and the acceptance summary printed after the run."""

from __future__ import annotations

import functools
import os
from pathlib import Path

import numpy as np
import pytest

from sparse_split.data import load_mnist

FIXTURES = Path(__file__).parent / "fixtures"
TINY_MNIST = FIXTURES / "mnist"


@functools.lru_cache(maxsize=None)
def full_mnist_dir():
    """Directory holding the canonical MNIST files, or None."""
    for cand in (os.environ.get("SPARSE_SPLIT_DATA"), "/root/data/mnist"):
        if not cand:
            continue
        d = Path(cand)
        if any((d / f"t10k-labels-idx1-ubyte{ext}").exists() for ext in ("", ".gz")):
            try:
                if len(load_mnist(d, "test")) == 10000:
                    return d
            except Exception:
                pass
    return None


@pytest.fixture(scope="session")
def tiny_train():
    return load_mnist(TINY_MNIST, "train")


@pytest.fixture(scope="session")
def tiny_test():
    return load_mnist(TINY_MNIST, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def small_trained(tiny_train):
    """Quickly trained [800,40,40,10] sparse model with a split plan and exit branch."""
    from sparse_split.core import TrainConfig, init_model, train
    from sparse_split.split_ee import ExitPolicy, SplitPlan, attach_exit, split_model, train_exit
    from sparse_split.topology import NeuronalConfig

    cfg = TrainConfig(epochs=8, learning_rate=2e-3, batch_size=32, seed=0)
    model = init_model(NeuronalConfig((800, 40, 40, 10), (2, 9, 10)), 0)
    train(model, tiny_train, None, cfg)
    plan = SplitPlan.for_config(model.config)
    head, tail = split_model(model, plan.split_junction)
    branch = attach_exit(head, (), seed=1)
    train_exit(head, branch, tiny_train, cfg)
    return {"model": model, "plan": plan, "head": head, "tail": tail, "branch": branch,
            "policy": ExitPolicy(0.9)}
