import numpy as np
import pytest
from hypothesis import settings

from tempheno.cohort import CohortTensor, OrganLabelSet

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_tensor(values, mask=None, features=None, ids=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    n, p, _ = values.shape
    features = features or tuple(f"f{j}" for j in range(p))
    ids = ids or tuple(f"s{i}" for i in range(n))
    return CohortTensor(np.where(mask, values, np.nan), mask, features, ids)


def make_labels(rows, ids=None):
    rows = np.asarray(rows, dtype=np.int8)
    ids = ids or tuple(f"s{i}" for i in range(rows.shape[0]))
    return OrganLabelSet(rows, ids)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
