import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dietattn.rng import Rng
from dietattn.tensor import Matrix


def rand_matrix(rows, cols, seed, label="m", scale=1.0):
    m = Matrix(rows, cols)
    Rng(seed, label).fill_normal(m.data, scale)
    return m


def rand_tokens(rng, n, vocab):
    return [rng.randint(0, vocab) for _ in range(n)]


def rand_batch(seed, count, n, vocab, num_classes):
    rng = Rng(seed, "batch")
    out = []
    for _ in range(count):
        out.append((rand_tokens(rng, n, vocab),
                    [rng.randint(0, num_classes) for _ in range(n)]))
    return out


@pytest.fixture
def rng():
    return Rng(1234, "test")
