import numpy as np
import pytest

from knn_el.encoder import FeatureHasherConfig
from knn_el.synthetic import SyntheticSpec, generate_synthetic

TINY_HASHER = FeatureHasherConfig(ngram_sizes=(2, 3, 4), feature_dim=1024, hash_seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(
        SyntheticSpec(n_entities=40, n_train=300, n_validation=50, n_test=80, seed=11)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
