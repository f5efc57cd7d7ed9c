import numpy as np
import pytest

from mfgflock.flows import FlowConfig, FlowModel


def random_flow(D, rng, n_layers=3, K=6, hidden=8, spread=0.2):
    """A flow with random (non-identity) conditioners and standardiser."""
    cfg = FlowConfig(n_layers=n_layers, K=K, hidden=hidden)
    model = FlowModel.create(D, cfg, rng, identity=False)
    model.params += spread * rng.standard_normal(model.params.size)
    model.mean = rng.normal(size=D)
    model.scale = np.exp(rng.uniform(-1, 1, D))
    return model


def numerical_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of ``f: R^D -> R^D`` at a single point."""
    D = x.size
    J = np.empty((D, D))
    for k in range(D):
        e = np.zeros(D)
        e[k] = h
        J[:, k] = (f(x + e) - f(x - e)) / (2 * h)
    return J


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``criterion(name, passed, detail)`` records one acceptance line and returns ``passed``."""
    lines = request.config.stash[ACCEPTANCE]

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
