import numpy as np
import pytest

from egru_lm.core_math import Rng
from egru_lm.lm import LmConfig, LmModel


@pytest.fixture
def rng():
    return Rng(1234)


def small_model(cell="egru", vocab=12, embed=6, hidden=(5, 6), mode="event", seed=0, **kw):
    cfg = LmConfig(vocab_size=vocab, embed_dim=embed, hidden_dims=hidden, cell=cell, mode=mode, **kw)
    return LmModel.init(cfg, Rng(seed).child("model"))


def write_tiny_corpus(path):
    """500-token corpus over 18 words (vocabulary of 20 with the specials)."""
    gen = np.random.default_rng(0)
    words = [f"w{i}" for i in range(18)]

    def text(n_lines):
        lines = []
        for _ in range(n_lines):
            start = gen.integers(0, 18)
            # predictable successor structure with a little noise
            line = [words[(start + k) % 18] if gen.random() > 0.1 else words[gen.integers(0, 18)]
                    for k in range(9)]
            lines.append(" ".join(line))
        return "\n".join(lines) + "\n"

    (path / "train.txt").write_text(text(50))
    (path / "valid.txt").write_text(text(10))
    (path / "test.txt").write_text(text(10))
    return path


@pytest.fixture
def tiny_corpus_dir(tmp_path):
    return write_tiny_corpus(tmp_path)


# one PASS/FAIL line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
