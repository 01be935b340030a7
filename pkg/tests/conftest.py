import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from karsein.data import encode, make_synthetic_ctr  # noqa: E402
from karsein.model import KarseinModel, ModelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    schema, table = make_synthetic_ctr(3000, [20, 30, 3, 5], seed=7)
    return encode(table, schema, seed=0)


def tiny_model(field_dims=(5, 4, 3), dtype=np.float64, **kw):
    base = dict(field_dims=list(field_dims), dim=4, explicit_hidden=[3], implicit_hidden=[4],
                order=3, grid=5, pairwise_layers=[1, 2], seed=0, embedding_std=0.3)
    base.update(kw)
    return KarseinModel(ModelConfig(**base), dtype=dtype)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
