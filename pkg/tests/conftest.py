import numpy as np
import pytest

from twosys.targets import TargetDensity


class CountingTarget(TargetDensity):
    """Wraps a target and counts per-point gradient and density evaluations."""

    def __init__(self, base):
        super().__init__(base.dim)
        self.base = base
        self.name = base.name
        self.moments = base.moments
        self.gradients = 0
        self.densities = 0

    @staticmethod
    def _points(x):
        return int(np.prod(np.shape(x)[:-1], dtype=int))

    def logp_and_grad(self, x):
        n = self._points(x)
        self.gradients += n
        self.densities += n
        return self.base.logp_and_grad(x)

    def log_density(self, x):
        self.densities += self._points(x)
        return self.base.log_density(x)

    def grad_log_density(self, x):
        self.gradients += self._points(x)
        return self.base.grad_log_density(x)

    def mode(self):
        return self.base.mode()


@pytest.fixture
def counting():
    return CountingTarget


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n][1])
