import numpy as np
import pytest

from asyncov.data_model import Dataset, ModalityLayout, ObservationRecord
from asyncov.simulation import SimConfig, generate_truth, simulate_dataset


def make_dataset(rng, dims=(3, 4), n_subjects=6, n_visits=3, n_cov=1, masks=None):
    """Small random dataset; ``masks`` cycles over records (default: full and singles)."""
    lay = ModalityLayout.generic(list(dims))
    if masks is None:
        masks = [lay.full_mask()] + [(k,) for k in range(lay.K)]
    recs = []
    t = 0
    for i in range(n_subjects):
        for j in range(n_visits):
            mask = tuple(masks[t % len(masks)])
            t += 1
            y = rng.standard_normal(len(lay.indices(mask)))
            recs.append(ObservationRecord(f"s{i}", j + 1, 0.5 * j, rng.standard_normal(n_cov), mask, y))
    return Dataset(lay, tuple(recs), tuple(f"c{c + 1}" for c in range(n_cov)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_small():
    rng = np.random.default_rng(3)
    truth = generate_truth(rng)
    ds = simulate_dataset(truth, SimConfig(N=12, sync_pct=0.5), rng)
    return truth, ds


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
