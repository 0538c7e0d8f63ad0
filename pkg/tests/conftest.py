import numpy as np
import pytest
import torch

from deadbranch.embedding import train_skipgram
from deadbranch.models import build_model
from deadbranch.synth import generate_corpus, token_corpus

torch.set_num_threads(1)

# acceptance criterion -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(60, 3, seed=0)


@pytest.fixture(scope="session")
def table(corpus):
    return train_skipgram(token_corpus(corpus), dim=24, epochs=2, seed=0)


@pytest.fixture(scope="session")
def models(table):
    return {fam: build_model(fam, 0, table) for fam in ("acfg-gnn", "graph-matcher", "seq-embed")}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
