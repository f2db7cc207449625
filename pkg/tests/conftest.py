import sys

import numpy as np
import pytest

from abm.config import TrainConfig
from abm.data import Sample, collate
from abm.gradcheck import TINY, tiny_problem
from abm.model import ABMModel


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


def tiny_model(variant="abm", seed=0, **kw):
    cfg = tiny_config(variant=variant, seed=seed, **kw)
    vocab, batch = tiny_problem(seed)
    return ABMModel(cfg.model_config(len(vocab)), seed=seed), vocab, batch


def random_samples(n, vocab, seed=0, hw=((20, 28), (16, 40)), max_len=4):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        h = int(rng.integers(*hw[0]))
        w = int(rng.integers(*hw[1]))
        tgt = rng.integers(3, len(vocab), int(rng.integers(1, max_len + 1))).tolist()
        out.append(Sample(f"s{i}", rng.random((h, w)).astype(np.float32), tgt))
    return out


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def tiny_samples(tiny):
    _, vocab, _ = tiny
    return random_samples(5, vocab)


@pytest.fixture
def collated(tiny_samples):
    return collate(tiny_samples)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
