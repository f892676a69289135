import numpy as np
import pytest

from mixbart.ensemble import BartConfig
from mixbart.nbgibbs import PanelDataset, PriorConfig
from mixbart.spatial import CarStructure, lattice_adjacency


def make_panel(n_days=15, lattice=(2, 2), q=2, p=2, seed=0):
    rng = np.random.default_rng(seed)
    n_reg = lattice[0] * lattice[1]
    region = np.repeat(np.arange(n_reg), n_days)
    n = region.size
    X = rng.random((n, p))
    Z = rng.random((n, q))
    pop = np.repeat(rng.uniform(5e4, 2e5, n_reg), n_days)
    eta = np.log(pop) - 8 + X @ np.linspace(-1, 1, p) + np.sin(3 * Z[:, 0])
    y = rng.poisson(rng.gamma(1.5, np.exp(eta)))
    data = PanelDataset(y, pop, X, Z, region, tuple(f"R{i}" for i in range(n_reg)),
                        date=np.tile(np.arange(n_days), n_reg))
    return data, CarStructure.from_adjacency(lattice_adjacency(*lattice), data.region_ids)


@pytest.fixture
def panel():
    return make_panel()


@pytest.fixture
def quick_prior():
    return PriorConfig(bart=BartConfig(n_trees=5), n_burn=20, n_save=10, thin=2, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
