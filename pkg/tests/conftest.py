import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from adapterlab.dist import CondDist, Vocab  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).parent.parent


def random_dist(rng: np.random.Generator, n: int, zeros: bool = True) -> CondDist:
    """Dirichlet draw, optionally with some entries forced to exactly zero."""
    w = rng.dirichlet(np.full(n, rng.choice([0.1, 0.5, 1.0, 3.0])))
    if zeros and n > 1 and rng.random() < 0.3:
        w[rng.random(n) < 0.3] = 0.0
        if w.sum() == 0:
            w[rng.integers(n)] = 1.0
    return CondDist.from_probs(w / w.sum())


@st.composite
def dists(draw, min_size=2, max_size=12, allow_zeros=True):
    n = draw(st.integers(min_size, max_size))
    lo = 0.0 if allow_zeros else 1e-3
    w = draw(st.lists(st.floats(lo, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3))
    w = np.asarray(w)
    return CondDist.from_probs(w / w.sum())


class ConstantModel:
    """Same next-token distribution for every context (hand-checkable harness fixtures)."""

    def __init__(self, probs, tokens=None):
        self.dist = CondDist.from_probs(probs)
        n = len(probs)
        self.vocab = Vocab(tuple(tokens or [f"t{i}" for i in range(n - 1)] + ["</s>"]), eos_id=n - 1)

    def cond_dist(self, context):
        return self.dist


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria outcomes, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
