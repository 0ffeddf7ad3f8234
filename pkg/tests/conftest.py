from __future__ import annotations

import numpy as np
import pytest

from svbackdoor import dsp, svnet
from svbackdoor.corpus import gen_corpus
from svbackdoor.svnet import TrainConfig


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(12, 6, seed=3)


@pytest.fixture(scope="session")
def small_feats(small_corpus):
    return dsp.features_batch([u.wave for u in small_corpus.utterances])


@pytest.fixture(scope="session")
def small_model(small_corpus, small_feats):
    cfg = TrainConfig(speakers_per_batch=6, utterances_per_speaker=3, steps=400, seed=1)
    return svnet.train(small_corpus, cfg, feats=small_feats)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
