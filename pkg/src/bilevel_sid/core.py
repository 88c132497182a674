"""Problem interface, feasible sets and reference (exact) hypergradients.

A bilevel problem here is

    min_{lam in Lambda}  f(lam) = E(w(lam), lam)   with   w(lam) = Phi(w(lam), lam),

where ``Phi(., lam)`` is a contraction.  Problems expose deterministic oracles
(values, partial gradients and Jacobian-transpose-vector products) and their
single-sample stochastic counterparts.  Everything is dense float64 numpy.
"""
from __future__ import annotations

import abc
import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalFailure

LS_TOL = 1e-10
LL_TOL = 1e-10


def as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Feasible sets
# ---------------------------------------------------------------------------


class FeasibleSet(abc.ABC):
    """Closed convex subset of R^m with an exact Euclidean projection."""

    @abc.abstractmethod
    def project(self, point: np.ndarray) -> np.ndarray: ...

    def contains(self, point, tol: float = 1e-12) -> bool:
        point = as_vector(point)
        return float(np.linalg.norm(point - self.project(point))) <= tol

    @abc.abstractmethod
    def max_norm(self) -> float:
        """sup of ||lam|| over the set (inf for unbounded sets)."""

    @abc.abstractmethod
    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """Draw a point of the set (used by property tests and random probes)."""

    @abc.abstractmethod
    def to_dict(self) -> dict: ...


@dataclass(frozen=True)
class FullSpace(FeasibleSet):
    def project(self, point):
        return as_vector(point).copy()

    def max_norm(self):
        return float("inf")

    def sample(self, rng, m):
        return rng.standard_normal(m)

    def to_dict(self):
        return {"kind": "full-space"}


@dataclass(frozen=True, eq=False)
class Box(FeasibleSet):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower, upper = as_vector(self.lower), as_vector(self.upper)
        if lower.shape != upper.shape:
            raise ConfigurationError("box bounds must have the same shape")
        if np.any(lower > upper):
            raise ConfigurationError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def project(self, point):
        return np.clip(as_vector(point), self.lower, self.upper)

    def max_norm(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def sample(self, rng, m):
        lo = np.where(np.isfinite(self.lower), self.lower, -10.0)
        hi = np.where(np.isfinite(self.upper), self.upper, 10.0)
        return rng.uniform(lo, hi)

    def to_dict(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class Ball(FeasibleSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("ball requires radius > 0")
        object.__setattr__(self, "center", as_vector(self.center))
        object.__setattr__(self, "radius", float(self.radius))

    def project(self, point):
        point = as_vector(point)
        offset = point - self.center
        dist = float(np.linalg.norm(offset))
        if dist <= self.radius:
            return point.copy()
        return self.center + offset * (self.radius / dist)

    def max_norm(self):
        return float(np.linalg.norm(self.center)) + self.radius

    def sample(self, rng, m):
        direction = rng.standard_normal(m)
        direction /= np.linalg.norm(direction)
        return self.center + direction * self.radius * rng.uniform() ** (1.0 / m)

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


def feasible_set_from_dict(spec: dict | None, m: int) -> FeasibleSet:
    if spec is None:
        return FullSpace()
    kind = spec.get("kind", "full-space")
    if kind == "full-space":
        return FullSpace()
    if kind == "box":
        lower = np.broadcast_to(as_vector(spec["lower"]), (m,)).copy()
        upper = np.broadcast_to(as_vector(spec["upper"]), (m,)).copy()
        return Box(lower, upper)
    if kind == "ball":
        center = np.broadcast_to(as_vector(spec.get("center", 0.0)), (m,)).copy()
        return Ball(center, spec["radius"])
    raise ConfigurationError(f"unknown feasible set kind {kind!r}")


def project(feasible_set: FeasibleSet, point) -> np.ndarray:
    """Euclidean projection of ``point`` onto ``feasible_set``."""
    return feasible_set.project(point)


def prox_grad_mapping(lam, grad, alpha: float, feasible_set: FeasibleSet) -> np.ndarray:
    """Proximal gradient mapping ``(lam - P(lam - alpha * grad)) / alpha``.

    Vanishes exactly at the stationary points of the constrained problem and
    equals ``grad`` when the set is the whole space.
    """
    if not alpha > 0:
        raise ConfigurationError(f"alpha must be > 0, got {alpha}")
    lam = as_vector(lam)
    return (lam - feasible_set.project(lam - alpha * as_vector(grad))) / alpha


# ---------------------------------------------------------------------------
# Constants and the oracle interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemConstants:
    """Regularity and noise constants of a bilevel problem.

    ``q`` is the contraction factor of ``Phi(., lam)``; ``nu*``/``mu*`` are
    Lipschitz constants of the partial Jacobians of ``Phi`` and gradients of
    ``E`` in ``w`` (barred versions: in ``lam``); ``L_E`` bounds
    ``||grad_1 E||``; ``L_Phi`` bounds ``||d_2 Phi(w(lam), lam)||``; ``B``
    bounds ``||w(lam)||``.  The ``sigma*`` are variance parameters of the
    stochastic oracles (matrix variances in Frobenius norm).
    """

    q: float
    nu1: float = 0.0
    nu2: float = 0.0
    mu1: float = 0.0
    mu2: float = 0.0
    L_E: float = 0.0
    mu1_bar: float = 0.0
    mu2_bar: float = 0.0
    nu1_bar: float = 0.0
    nu2_bar: float = 0.0
    L_Phi: float = 0.0
    B: float = 0.0
    sigma1: float = 0.0
    sigma2: float = 0.0
    sigma1_p: float = 0.0
    sigma2_p: float = 0.0
    sigma1_E: float = 0.0
    sigma2_E: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ConfigurationError(f"contraction factor q must lie in (0, 1), got {self.q}")
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name != "q" and not value >= 0.0:
                raise ConfigurationError(f"constant {field.name} must be >= 0, got {value}")

    @property
    def is_deterministic(self) -> bool:
        return (self.sigma1 == self.sigma2 == self.sigma1_p == self.sigma2_p
                == self.sigma1_E == self.sigma2_E == 0.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class BilevelProblem(abc.ABC):
    """Oracle bundle for a bilevel problem with a contractive lower level.

    Subclasses implement the deterministic oracles and the single-sample
    stochastic ones; the ``*_batch`` methods average ``J`` draws and may be
    overridden with vectorised versions.  ``sample_grad_E`` returns both
    partial gradients from one draw of the upper-level noise.
    """

    d: int
    m: int
    constants: ProblemConstants
    feasible_set: FeasibleSet
    name: str = "problem"

    # deterministic oracles
    @abc.abstractmethod
    def E(self, w, lam) -> float: ...

    @abc.abstractmethod
    def grad_E(self, w, lam) -> tuple[np.ndarray, np.ndarray]: ...

    def grad1_E(self, w, lam):
        return self.grad_E(w, lam)[0]

    def grad2_E(self, w, lam):
        return self.grad_E(w, lam)[1]

    @abc.abstractmethod
    def Phi(self, w, lam) -> np.ndarray: ...

    @abc.abstractmethod
    def jac1_Phi_T_vp(self, w, lam, v) -> np.ndarray: ...

    @abc.abstractmethod
    def jac2_Phi_T_vp(self, w, lam, v) -> np.ndarray: ...

    # stochastic oracles
    @abc.abstractmethod
    def sample_Phi(self, w, lam, rng) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_jac1_Phi_T_vp(self, w, lam, v, rng) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_jac2_Phi_T_vp(self, w, lam, v, rng) -> np.ndarray: ...

    @abc.abstractmethod
    def sample_grad_E(self, w, lam, rng) -> tuple[np.ndarray, np.ndarray]: ...

    def sample_grad1_E(self, w, lam, rng):
        return self.sample_grad_E(w, lam, rng)[0]

    def sample_grad2_E(self, w, lam, rng):
        return self.sample_grad_E(w, lam, rng)[1]

    def sample_grad_E_batch(self, w, lam, J, rng):
        g1 = np.zeros(self.d)
        g2 = np.zeros(self.m)
        for _ in range(J):
            a, b = self.sample_grad_E(w, lam, rng)
            g1 += a
            g2 += b
        return g1 / J, g2 / J

    def sample_jac2_Phi_T_vp_batch(self, w, lam, v, J, rng):
        acc = np.zeros(self.m)
        for _ in range(J):
            acc += self.sample_jac2_Phi_T_vp(w, lam, v, rng)
        return acc / J

    # side oracles
    def exact_ll(self, lam) -> np.ndarray:
        """Lower-level fixed point; default is deterministic iteration."""
        return solve_fixed_point(self, lam)

    def f(self, lam) -> float:
        lam = as_vector(lam)
        return float(self.E(self.exact_ll(lam), lam))

    def in_region(self, w) -> bool:
        """Whether ``w`` lies where ``L_E`` and ``sigma1_E`` were computed."""
        return True

    def min_f(self) -> float | None:
        """Minimum of f over the feasible set, when known; else None."""
        return None

    def describe(self) -> dict:
        return {"name": self.name, "d": self.d, "m": self.m}


# ---------------------------------------------------------------------------
# Reference solves
# ---------------------------------------------------------------------------


def solve_fixed_point(problem: BilevelProblem, lam, w0=None, tol: float = LL_TOL,
                      max_iter: int = 100_000) -> np.ndarray:
    """Deterministic fixed-point iteration ``w <- Phi(w, lam)`` to ``||Phi(w)-w|| <= tol``."""
    lam = as_vector(lam)
    w = np.zeros(problem.d) if w0 is None else as_vector(w0).copy()
    residual = np.inf
    for _ in range(max_iter):
        nxt = problem.Phi(w, lam)
        residual = float(np.linalg.norm(nxt - w))
        w = nxt
        if residual <= tol:
            return w
    raise NumericalFailure(
        f"lower-level iteration did not reach {tol:g} in {max_iter} steps", residual)


def exact_ls_solution(problem: BilevelProblem, lam, w, rhs, tol: float = LS_TOL,
                      max_iter: int = 100_000) -> np.ndarray:
    """Solve ``(I - d1Phi(w, lam)^T) v = rhs`` by the iteration ``v <- d1Phi^T v + rhs``.

    Stops once the residual is at most ``tol * (1 + ||rhs||)``; raises
    :class:`NumericalFailure` (carrying the last residual) otherwise.
    """
    lam, w, rhs = as_vector(lam), as_vector(w), as_vector(rhs)
    threshold = tol * (1.0 + float(np.linalg.norm(rhs)))
    v = rhs.copy()
    residual = np.inf
    for _ in range(max_iter):
        jv = problem.jac1_Phi_T_vp(w, lam, v)
        residual = float(np.linalg.norm(v - jv - rhs))
        if residual <= threshold:
            return v
        v = jv + rhs
    raise NumericalFailure(
        f"linear system residual {residual:.3e} above {threshold:.3e} after {max_iter} steps",
        residual)


def exact_hypergradient(problem: BilevelProblem, lam) -> np.ndarray:
    """Implicit-function-theorem hypergradient at ``lam``.

    ``grad_2 E(w, lam) + d2Phi(w, lam)^T v`` with ``w = w(lam)`` and ``v`` the
    solution of the adjoint linear system with right-hand side ``grad_1 E``.
    """
    lam = as_vector(lam)
    w = problem.exact_ll(lam)
    g1, g2 = problem.grad_E(w, lam)
    v = exact_ls_solution(problem, lam, w, g1)
    return g2 + problem.jac2_Phi_T_vp(w, lam, v)
