"""Stochastic Krasnoselskii-Mann solvers for the lower level and the adjoint system.

Both solvers run ``x <- x + eta_i (T_hat(x) - x)`` for a stochastic operator
``T_hat`` whose mean is a ``q``-contraction, with one fresh sample per step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import BilevelProblem, ProblemConstants, as_vector
from .errors import ConfigurationError, NumericalFailure
from .seeding import as_generator


def sigma2_tilde(constants: ProblemConstants) -> float:
    """Effective multiplicative-noise level ``max(2 sigma1' / (1-q)^2, sigma2)``."""
    q = constants.q
    return max(2.0 * constants.sigma1_p / (1.0 - q) ** 2, constants.sigma2)


@dataclass(frozen=True)
class DecreasingSchedule:
    """Step sizes ``beta / (gamma + i)``."""

    beta: float
    gamma: float

    kind = "decreasing"

    def step(self, i: int) -> float:
        return self.beta / (self.gamma + i)

    def validate(self, constants: ProblemConstants) -> None:
        q = constants.q
        if not self.beta > 1.0 / (1.0 - q * q):
            raise ConfigurationError(
                f"decreasing schedule needs beta > 1/(1-q^2) = {1.0 / (1.0 - q * q):.6g}, "
                f"got beta={self.beta}")
        need = self.beta * (1.0 + sigma2_tilde(constants))
        if not self.gamma >= need:
            raise ConfigurationError(
                f"decreasing schedule needs gamma >= beta(1+sigma2_tilde) = {need:.6g}, "
                f"got gamma={self.gamma}")

    def to_dict(self):
        return {"kind": "decreasing", "beta": self.beta, "gamma": self.gamma}


@dataclass(frozen=True)
class ConstantSchedule:
    """Constant step size ``eta``."""

    eta: float

    kind = "constant"

    def step(self, i: int) -> float:
        return self.eta

    def validate(self, constants: ProblemConstants) -> None:
        limit = 1.0 / (1.0 + sigma2_tilde(constants))
        if not 0.0 < self.eta <= limit:
            raise ConfigurationError(
                f"constant schedule needs 0 < eta <= 1/(1+sigma2_tilde) = {limit:.6g}, "
                f"got eta={self.eta}")

    def to_dict(self):
        return {"kind": "constant", "eta": self.eta}


StepSchedule = Union[DecreasingSchedule, ConstantSchedule]


def theorem_schedule(constants: ProblemConstants, beta: float | None = None) -> DecreasingSchedule:
    """Decreasing schedule at the edge of the admissible region.

    ``beta`` defaults to ``2 / (1 - q^2)`` and ``gamma`` to ``beta (1 + sigma2_tilde)``.
    """
    q = constants.q
    if beta is None:
        beta = 2.0 / (1.0 - q * q)
    return DecreasingSchedule(beta=beta, gamma=beta * (1.0 + sigma2_tilde(constants)))


def schedule_from_dict(spec: dict | None, constants: ProblemConstants) -> StepSchedule:
    if spec is None or spec.get("kind", "theorem") == "theorem":
        return theorem_schedule(constants, (spec or {}).get("beta"))
    if spec["kind"] == "decreasing":
        gamma = spec.get("gamma")
        if gamma is None:
            return theorem_schedule(constants, spec["beta"])
        return DecreasingSchedule(float(spec["beta"]), float(gamma))
    if spec["kind"] == "constant":
        return ConstantSchedule(float(spec["eta"]))
    raise ConfigurationError(f"unknown schedule kind {spec['kind']!r}")


# ---------------------------------------------------------------------------
# Rate functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFunctions:
    """Upper bounds ``rho(t)`` on the LL mean squared error after ``t`` steps
    and ``sigma(k)`` on the LS mean squared error after ``k`` steps.

    ``d_w``/``d_v`` are set for the decreasing schedule only.
    """

    constants: ProblemConstants
    schedule: StepSchedule
    d_w: float | None = None
    d_v: float | None = None

    def rho(self, t: int) -> float:
        c = self.constants
        if isinstance(self.schedule, DecreasingSchedule):
            return self.d_w / (self.schedule.gamma + t)
        eta, q2 = self.schedule.eta, c.q ** 2
        return (1.0 - eta * (1.0 - q2)) ** t * c.B ** 2 + eta * c.sigma1 / (1.0 - q2)

    def sigma(self, k: int) -> float:
        c = self.constants
        if isinstance(self.schedule, DecreasingSchedule):
            return self.d_v / (self.schedule.gamma + k)
        eta, q, q2 = self.schedule.eta, c.q, c.q ** 2
        scale = (c.L_E ** 2 + c.sigma1_E) / (1.0 - q) ** 2
        return (1.0 - eta * (1.0 - q2)) ** k * scale + eta / (1.0 - q2) * 2.0 * scale * c.sigma1_p


def rate_functions(constants: ProblemConstants, schedule: StepSchedule) -> RateFunctions:
    """Mean-squared-error rates of the two solvers under ``schedule``.

    The starting points are taken to be zero, so the initial LL error is
    bounded by ``B^2`` and the initial LS error by ``(L_E^2 + sigma1_E)/(1-q)^2``.
    """
    if not isinstance(schedule, DecreasingSchedule):
        return RateFunctions(constants, schedule)
    c, beta, gamma = constants, schedule.beta, schedule.gamma
    q, q2 = c.q, c.q ** 2
    denom = beta * (1.0 - q2) - 1.0
    if not denom > 0:
        raise ConfigurationError(
            f"rates need beta > 1/(1-q^2) = {1.0 / (1.0 - q2):.6g}, got beta={beta}")
    d_w = max(gamma * c.B ** 2, beta ** 2 * c.sigma1 / denom)
    scale = (c.L_E ** 2 + c.sigma1_E) / (1.0 - q) ** 2
    d_v = max(scale * gamma, 2.0 * scale * c.sigma1_p * beta ** 2 / denom)
    return RateFunctions(constants, schedule, d_w=d_w, d_v=d_v)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"{what} iterate became non-finite")
    return x


def km_ll(problem: BilevelProblem, lam, w0, t: int, schedule: StepSchedule, rng,
          strict: bool = True) -> tuple[np.ndarray, int]:
    """Stochastic fixed-point iteration for the lower level.

    Runs ``w <- w + eta_i (Phi_hat(w, lam) - w)`` for ``i = 0..t-1`` with one
    sample per step and returns ``(w_t, t)``.
    """
    if t < 0:
        raise ConfigurationError("t must be >= 0")
    if strict:
        schedule.validate(problem.constants)
    lam = as_vector(lam)
    w = np.zeros(problem.d) if w0 is None else as_vector(w0).copy()
    if t == 0:
        return w, 0
    gen = as_generator(rng)
    for i in range(t):
        eta = schedule.step(i)
        w += eta * (problem.sample_Phi(w, lam, gen) - w)
    return _check_finite(w, "lower-level"), t


def km_ls(problem: BilevelProblem, lam, w, rhs, v0, k: int, schedule: StepSchedule, rng,
          strict: bool = True) -> tuple[np.ndarray, int]:
    """Stochastic fixed-point iteration for ``(I - d1Phi(w, lam)^T) v = rhs``.

    ``rhs`` stays fixed for the whole run; each step draws one Jacobian sample:
    ``v <- v + eta_i (d1Phi_hat^T v + rhs - v)``.  Returns ``(v_k, k)``.
    """
    if k < 0:
        raise ConfigurationError("k must be >= 0")
    if strict:
        schedule.validate(problem.constants)
    lam, w, rhs = as_vector(lam), as_vector(w), as_vector(rhs)
    v = np.zeros(problem.d) if v0 is None else as_vector(v0).copy()
    if k == 0:
        return v, 0
    gen = as_generator(rng)
    for i in range(k):
        eta = schedule.step(i)
        v += eta * (problem.sample_jac1_Phi_T_vp(w, lam, v, gen) + rhs - v)
    return _check_finite(v, "linear-system"), k


def geometric_iterations(q: float, tol: float) -> int:
    """Smallest ``t`` with ``q**t <= tol``."""
    return max(0, math.ceil(math.log(tol) / math.log(q)))
