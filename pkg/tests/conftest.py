import numpy as np
import pytest

from mrpkit.cells import CovariateSchema, Microdata


@pytest.fixture
def schema2():
    return CovariateSchema([("a", ["1", "2", "3"]), ("b", ["x", "y"])])


def random_microdata(schema, n, rng, outcome=True, weight=False):
    codes = np.column_stack([rng.integers(0, k, n) for k in schema.shape])
    y = rng.normal(codes.sum(axis=1), 1.0) if outcome else None
    w = rng.uniform(0.5, 3.0, n) if weight else None
    return Microdata(schema, codes, y, w)


@pytest.fixture
def rng():
    return np.random.default_rng(20261019)
