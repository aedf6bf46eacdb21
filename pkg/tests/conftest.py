import numpy as np
import pytest

from conation.hmm import GaussianState, HmmModel

_acceptance = []


def random_model(rng, n_states, dim, word="", zero_prob=0.0):
    """Random valid HMM with well-conditioned full covariances.

    ``zero_prob`` knocks out transition entries at random (keeping one per row).
    """
    pi = rng.dirichlet(np.ones(n_states))
    a = rng.dirichlet(np.ones(n_states), size=n_states)
    if zero_prob:
        mask = rng.random((n_states, n_states)) < zero_prob
        mask[np.arange(n_states), rng.integers(0, n_states, n_states)] = False
        a = np.where(mask, 0.0, a)
        a /= a.sum(axis=1, keepdims=True)
    states = []
    for _ in range(n_states):
        m = rng.normal(size=(dim, dim))
        cov = m @ m.T / dim + 0.5 * np.eye(dim)
        states.append(GaussianState(rng.uniform(-2, 2, dim), cov))
    return HmmModel(pi, a, tuple(states), word)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = report.user_properties and dict(report.user_properties).get("acceptance")
    if name:
        _acceptance.append((name, report.outcome))


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker:
        item.user_properties.append(("acceptance", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
