import numpy as np
import pytest

from mop.data import gen_corpus
from mop.model import ModelConfig, init_model

MICRO = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11)
SMALL = dict(n_layers=5, d_model=16, n_heads=4, d_ff=24, vocab_size=32, max_seq_len=64)


def randomize_norms(model, seed=0):
    """Give every norm gain a non-trivial value so tests cannot pass by accident."""
    rng = np.random.default_rng(seed)
    for _, t in model.named_parameters():
        if t.ndim == 1:
            t.data = (1.0 + 0.3 * rng.normal(size=t.shape)).astype(t.dtype)
    return model


@pytest.fixture
def micro():
    return init_model(ModelConfig(**MICRO), seed=0)


@pytest.fixture
def small():
    return randomize_norms(init_model(ModelConfig(**SMALL), seed=1))


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(seed=3, n_docs=400, doc_len=32, vocab_size=32)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
