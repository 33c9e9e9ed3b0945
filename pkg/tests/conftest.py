import numpy as np
import pytest

from caprec.ingest import SplitSpec, sample_negatives, split_train_test
from caprec.synthetic import planted_implicit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_split():
    data = planted_implicit(num_users=40, num_items=50, rank=3, density=0.2, seed=3)
    tr, te = split_train_test(data, SplitSpec(3))
    return tr, te, sample_negatives(tr, te, 3), data


ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    ACCEPTANCE_RESULTS.setdefault("4", ("SKIP", "needs the MovieLens 100K ratings file (set CAPREC_ML100K)"))
    for key in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {status} - {detail}")
