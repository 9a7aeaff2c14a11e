import numpy as np
import pytest

from panelqr import solver
from panelqr.data import PanelData

# Every fit made in this process is certified; failures on data in general
# position fail the run (see test_acceptance criterion 3). Only a compact
# (general_position, passed, summary) record is kept per fit.
CERTIFICATES = []


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the certificate check sees the whole suite
    items.sort(key=lambda it: it.get_closest_marker("acceptance") is not None)


@pytest.fixture(autouse=True, scope="session")
def _record_certificates():
    original = solver._finish

    def recording(*args, **kwargs):
        res = original(*args, **kwargs)
        c = res.certificate
        if c is not None:
            CERTIFICATES.append((c.general_position, c.passed, None if c.passed else c.to_dict()))
        return res

    solver._finish = recording
    yield
    solver._finish = original


def pytest_sessionfinish(session, exitstatus):
    bad = [c for c in CERTIFICATES if c[0] and not c[1]]
    reporter = session.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line(
            f"optimality certificates: {len(CERTIFICATES)} fits checked, {len(bad)} failures on general-position data"
        )
    if bad and session.exitstatus == 0:
        session.exitstatus = 1


def make_panel(rng, N=20, T=6, p=2, tau=0.5, spread=1.0, unbalanced=False):
    T_i = rng.integers(2, T + 1, size=N) if unbalanced else np.full(N, T)
    unit = np.repeat(np.arange(N), T_i)
    alpha = spread * rng.normal(size=N)
    X = rng.normal(size=(unit.size, p)) + 0.5 * alpha[unit, None]
    y = X @ np.linspace(1.0, 0.5, p) + alpha[unit] + rng.standard_t(4, size=unit.size)
    return PanelData.from_arrays(unit, y, X)


@pytest.fixture
def rng():
    return np.random.default_rng(20241016)


@pytest.fixture
def panel(rng):
    return make_panel(rng)
