import sys

import numpy as np
import pytest

from bilevel_sid.core import BilevelProblem, FullSpace, ProblemConstants
from bilevel_sid.problems import (LinearQuadraticProblem, make_linear_quadratic, make_meta,
                                  make_ridge)


def scalar_lq(a=0.5, bmat=1.0, b=0.0, q=None, **kw):
    """d = m = 1 linear map ``a w + bmat lam + b`` with ``E = w^2 / 2``."""
    return LinearQuadraticProblem(a, [[bmat]], b=b, feasible_set=FullSpace(), lambda_radius=2.0,
                                  q=q, **kw)


class ScriptedBits:
    """Stand-in for a Generator whose ``integers`` calls return scripted bits."""

    def __init__(self, bits):
        self.bits = list(bits)

    def integers(self, n, size=None):
        return self.bits.pop(0)


class TwoPointToy(BilevelProblem):
    """d = m = 1 problem whose every stochastic oracle is a fair two-point draw.

    ``Phi_hat = 0.5 w + lam + 0.5 s``, ``d1Phi_hat = 0.5 + 0.25 s``,
    ``d2Phi_hat = 1 + 0.5 s``, ``grad E_hat = (w + s, 0.5 s)`` with
    ``s = +-1`` drawn through ``rng.integers(2)``.
    """

    d = m = 1
    name = "two-point-toy"
    feasible_set = FullSpace()
    constants = ProblemConstants(q=0.75, mu1=1.0, L_E=10.0, L_Phi=1.0, B=4.0,
                                 sigma1=0.25, sigma1_p=0.0625, sigma2_p=0.25,
                                 sigma1_E=1.0, sigma2_E=0.25)

    @staticmethod
    def _sign(rng):
        return 2.0 * rng.integers(2) - 1.0

    def E(self, w, lam):
        return 0.5 * float(w[0] ** 2)

    def grad_E(self, w, lam):
        return np.asarray(w, float).copy(), np.zeros(1)

    def Phi(self, w, lam):
        return 0.5 * np.asarray(w, float) + np.asarray(lam, float)

    def jac1_Phi_T_vp(self, w, lam, v):
        return 0.5 * np.asarray(v, float)

    def jac2_Phi_T_vp(self, w, lam, v):
        return np.asarray(v, float).copy()

    def sample_Phi(self, w, lam, rng):
        return self.Phi(w, lam) + 0.5 * self._sign(rng)

    def sample_jac1_Phi_T_vp(self, w, lam, v, rng):
        return (0.5 + 0.25 * self._sign(rng)) * np.asarray(v, float)

    def sample_jac2_Phi_T_vp(self, w, lam, v, rng):
        return (1.0 + 0.5 * self._sign(rng)) * np.asarray(v, float)

    def sample_grad_E(self, w, lam, rng):
        s = self._sign(rng)
        return np.asarray(w, float) + s, np.array([0.5 * s])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def lq_det():
    return make_linear_quadratic(d=20, m=5, q=0.7, seed=1).deterministic()


@pytest.fixture(scope="session")
def lq_additive():
    return make_linear_quadratic(d=5, m=2, noise_ll=1.0, noise_E=1.0, seed=0)


@pytest.fixture(scope="session")
def lq_jacobian():
    return make_linear_quadratic(d=4, m=2, q=0.5, noise_ll=0.3, noise_jac=0.05,
                                 noise_jac2=0.2, noise_E=0.5, seed=3)


@pytest.fixture(scope="session")
def ridge():
    return make_ridge(seed=0)


@pytest.fixture(scope="session")
def meta():
    return make_meta(T=4, d_task=3, m=2, seed=0)


@pytest.fixture(scope="session")
def benchmarks(lq_jacobian, ridge, meta):
    return {"linear-quadratic": lq_jacobian, "ridge-hyperopt": ridge, "meta-synthetic": meta}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
