import numpy as np
import pytest

from elastid.config import RunConfig, SweepSpec
from elastid.network import Dataset
from elastid.pipeline import solve_observation, sweep_points


@pytest.fixture(scope="session")
def small_fe_dataset():
    """A 4 x 3 FE grid plus 5 random validation rows on the default mesh."""
    cfg = RunConfig(sweep=SweepSpec(n_E=4, n_nu=3, n_val=5, seed=0))
    grid, val = sweep_points(cfg.sweep)
    out = []
    for P in (grid, val):
        Y = np.array([solve_observation((tuple(p), cfg.domain, cfg.fe, cfg.obs()))[0] for p in P])
        out.append(Dataset(P, Y))
    return tuple(out)


@pytest.fixture(scope="session")
def small_trained_net(small_fe_dataset):
    """Full-layout network briefly trained on the small FE grid."""
    from elastid.network import TrainingConfig, fit_normalization, init_network, train
    from elastid.observation import OBSERVATION_GROUPS

    train_set, val_set = small_fe_dataset
    net = init_network(seed=0)
    net.norm = fit_normalization(train_set, output_groups=OBSERVATION_GROUPS)
    net, _ = train(net, train_set, val_set, TrainingConfig(total_epochs=100, block_epochs=50, batch_size=4))
    return net


_RESULTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_RESULTS_KEY].append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
