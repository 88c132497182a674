"""Projected inexact hypergradient descent driven by SID (no warm start).

Each upper-level iteration ``s`` calls SID from ``w0 = v0 = 0`` with sizes
given by the regime, then steps ``lam <- P(lam - alpha * g_hat)``.  Iteration
``s`` draws only from its own stream, so any iteration can be replayed from
the stored ``lam_s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import compute_bounds, deterministic_rhs, finite_horizon_rhs, increasing_rhs
from .core import BilevelProblem, as_vector, exact_hypergradient, prox_grad_mapping
from .errors import ConfigurationError, NumericalFailure
from .seeding import SeedStream
from .sid import SIDConfig, sid
from .solvers import ConstantSchedule, DecreasingSchedule, StepSchedule

REGIMES = ("increasing", "finite_horizon", "deterministic")


@dataclass(frozen=True)
class Regime:
    kind: str
    c3: float

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.kind!r}")
        if not self.c3 > 0:
            raise ConfigurationError(f"c3 must be > 0, got {self.c3}")

    def to_dict(self):
        return {"kind": self.kind, "c3": self.c3}


def iteration_sizes(regime: Regime, s: int, S: int | None = None,
                    floor_t: bool = False) -> tuple[int, int, int]:
    """``(t_s, k_s, J_s)`` for upper-level iteration ``s``."""
    if s < 0:
        raise ConfigurationError("s must be >= 0")
    c3 = regime.c3
    if regime.kind == "increasing":
        n = math.ceil(c3 * (s + 1))
        return n, n, n
    if regime.kind == "finite_horizon":
        if S is None:
            raise ConfigurationError("finite-horizon sizes need the horizon S")
        n = math.ceil(c3 * S)
        return n, n, n
    t = math.ceil(c3 * math.log(s + 1))
    if floor_t:
        t = max(t, 1)
    return t, t, 1


@dataclass(frozen=True)
class BSGMConfig:
    alpha: float
    regime: Regime
    S: int
    schedule: StepSchedule
    lambda0: np.ndarray
    floor_t: bool = False
    strict: bool = True

    def __post_init__(self):
        if self.S < 0:
            raise ConfigurationError("S must be >= 0")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        object.__setattr__(self, "lambda0", as_vector(self.lambda0))

    def validate(self, problem: BilevelProblem) -> None:
        """Check the step size and the schedule against the problem constants."""
        c = problem.constants
        L_f = compute_bounds(c).L_f
        if L_f > 0 and self.alpha > 1.0 / L_f * (1 + 1e-12):
            raise ConfigurationError(f"alpha={self.alpha} exceeds 1/L_f = {1.0 / L_f:.6g}")
        if self.lambda0.shape != (problem.m,):
            raise ConfigurationError(f"lambda0 must have dimension {problem.m}")
        if not problem.feasible_set.contains(self.lambda0):
            raise ConfigurationError("lambda0 is not in the feasible set")
        if not self.strict:
            return
        if self.regime.kind == "deterministic":
            need = 1.0 / math.log(1.0 / c.q)
            if self.regime.c3 < need:
                raise ConfigurationError(
                    f"deterministic regime needs c3 >= 1/log(1/q) = {need:.6g}, got {self.regime.c3}")
            if not (isinstance(self.schedule, ConstantSchedule) and self.schedule.eta == 1.0):
                raise ConfigurationError("deterministic regime needs the constant schedule eta = 1")
            if not c.is_deterministic:
                raise ConfigurationError("deterministic regime needs zero-variance oracles")
        else:
            if not isinstance(self.schedule, DecreasingSchedule):
                raise ConfigurationError("stochastic regimes need a decreasing schedule")
            self.schedule.validate(c)

    def sizes(self, s: int) -> tuple[int, int, int]:
        return iteration_sizes(self.regime, s, self.S, self.floor_t)

    def to_dict(self):
        return {"alpha": self.alpha, "regime": self.regime.to_dict(), "S": self.S,
                "schedule": self.schedule.to_dict(), "lambda0": self.lambda0.tolist(),
                "floor_t": self.floor_t, "strict": self.strict}


@dataclass
class RunTrace:
    """Per-iteration record of one run.

    ``lambdas`` has ``S + 1`` entries (the last is ``lam_S``); the other
    per-iteration lists have ``S``.  ``G_alpha_norm_sq[s]`` is ``None`` when
    no exact hypergradient is available.
    """

    lambdas: list = field(default_factory=list)
    g_hat: list = field(default_factory=list)
    G_alpha_norm_sq: list = field(default_factory=list)
    f_values: list = field(default_factory=list)
    sizes: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    N: list = field(default_factory=list)
    in_region: list = field(default_factory=list)

    @property
    def S(self) -> int:
        return len(self.g_hat)

    @property
    def total_samples(self) -> int:
        return self.N[-1] if self.N else 0


def _iteration_rngs(stream):
    """Split an iteration stream into (four SID streams, task-sampling generator)."""
    if isinstance(stream, SeedStream):
        return stream, stream.child(5).generator()
    if isinstance(stream, np.random.Generator):
        kids = stream.spawn(5)
        return kids[:4], kids[4]
    raise TypeError("iteration stream must be a SeedStream or numpy Generator")


def replay_iteration(problem: BilevelProblem, config: BSGMConfig, lambda_s, s: int, stream):
    """Hypergradient estimate of iteration ``s`` at ``lambda_s`` from its own stream.

    Returns the :class:`~bilevel_sid.sid.SIDOutput`.
    """
    t, k, J = config.sizes(s)
    sid_rng, task_rng = _iteration_rngs(stream)
    sub = problem
    if hasattr(problem, "sample_task_subproblem"):
        sub = problem.sample_task_subproblem(task_rng)
    cfg = SIDConfig(t=t, k=k, J=J, schedule=config.schedule, strict=config.strict)
    return sid(sub, lambda_s, cfg, sid_rng)


def reference_hypergradient(problem: BilevelProblem, lam):
    """Closed form when the problem has one, else the implicit-differentiation solve."""
    closed = getattr(problem, "closed_form_hypergradient", None)
    if closed is not None:
        return closed(lam)
    return exact_hypergradient(problem, lam)


def _safe(fn, *args):
    try:
        return fn(*args)
    except (NumericalFailure, NotImplementedError):
        return None


def bsgm_run(problem: BilevelProblem, config: BSGMConfig, rng) -> RunTrace:
    """Run ``config.S`` upper-level iterations.

    ``rng`` is a :class:`SeedStream` (iteration ``s`` uses ``rng.child(s)``)
    or a numpy Generator (spawned into ``S`` children up front).
    """
    config.validate(problem)
    if isinstance(rng, SeedStream):
        streams = [rng.child(s) for s in range(config.S)]
    elif isinstance(rng, np.random.Generator):
        streams = rng.spawn(config.S)
    else:
        raise TypeError("rng must be a SeedStream or numpy Generator")

    trace = RunTrace()
    lam = config.lambda0.copy()
    total = 0
    for s in range(config.S):
        trace.lambdas.append(lam.copy())
        trace.f_values.append(_safe(problem.f, lam))
        try:
            out = replay_iteration(problem, config, lam, s, streams[s])
        except NumericalFailure as exc:
            raise NumericalFailure(f"upper-level iteration {s}: {exc}",
                                   getattr(exc, "residual", None)) from exc
        grad = _safe(reference_hypergradient, problem, lam)
        if grad is None:
            trace.G_alpha_norm_sq.append(None)
        else:
            G = prox_grad_mapping(lam, grad, config.alpha, problem.feasible_set)
            trace.G_alpha_norm_sq.append(float(G @ G))
        used = out.samples_zeta + out.samples_xi
        total += used
        trace.g_hat.append(out.hypergradient)
        trace.sizes.append(config.sizes(s))
        trace.samples.append(used)
        trace.N.append(total)
        trace.in_region.append(bool(out.w_in_region))
        lam = problem.feasible_set.project(lam - config.alpha * out.hypergradient)
        if not np.all(np.isfinite(lam)):
            raise NumericalFailure(f"upper-level iterate became non-finite at iteration {s}")
    trace.lambdas.append(lam.copy())
    trace.f_values.append(_safe(problem.f, lam))
    return trace


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationaritySeries:
    """Prefix averages of ``||G_alpha(lam_s)||^2`` and the best iterate.

    ``available`` is False (and the other fields empty) when the trace has no
    exact stationarity values.
    """

    available: bool
    averages: tuple = ()
    s_star: int | None = None
    min_value: float | None = None


UNAVAILABLE = StationaritySeries(available=False)


def stationarity_series(trace_or_values) -> StationaritySeries:
    values = (trace_or_values.G_alpha_norm_sq if isinstance(trace_or_values, RunTrace)
              else list(trace_or_values))
    if not values or any(v is None for v in values):
        return UNAVAILABLE
    arr = np.asarray(values, dtype=np.float64)
    averages = np.cumsum(arr) / np.arange(1, len(arr) + 1)
    s_star = int(np.argmin(arr))
    return StationaritySeries(True, tuple(float(a) for a in averages), s_star, float(arr[s_star]))


def inexact_pgd_bound(Delta_f: float, L_f: float, alpha: float, mse_sequence,
                      c: float | None = None) -> float:
    """Bound on ``(1/S) sum ||G_alpha(lam_s)||^2`` for projected inexact gradient descent.

    Without ``c`` (requires ``alpha <= 1/L_f``):
    ``(8 Delta_f + (10/L_f) sum mse) / (S alpha)``.
    With ``c > 0`` (requires ``alpha < 2/(L_f(1+c))``):
    ``(1/S) [4 Delta_f / c_alpha + 2 (1 + 1/(c_alpha L_f c)) sum mse]`` with
    ``c_alpha = alpha (2 - alpha L_f (1+c))``; ``c = 1/2``, ``alpha = 1/L_f``
    gives back the first form.
    """
    mse = np.asarray(list(mse_sequence), dtype=np.float64)
    S = len(mse)
    if S == 0:
        raise ConfigurationError("need at least one iteration")
    if not (alpha > 0 and L_f > 0):
        raise ConfigurationError("alpha and L_f must be > 0")
    if c is None:
        if alpha > 1.0 / L_f * (1 + 1e-12):
            raise ConfigurationError(f"alpha={alpha} exceeds 1/L_f = {1.0 / L_f:.6g}")
        return float((8.0 * Delta_f + 10.0 / L_f * mse.sum()) / (S * alpha))
    if not c > 0:
        raise ConfigurationError("c must be > 0")
    if not alpha < 2.0 / (L_f * (1.0 + c)):
        raise ConfigurationError(f"alpha={alpha} must be < 2/(L_f(1+c)) = {2.0 / (L_f * (1 + c)):.6g}")
    c_alpha = alpha * (2.0 - alpha * L_f * (1.0 + c))
    return float((4.0 * Delta_f / c_alpha + 2.0 * (1.0 + 1.0 / (c_alpha * L_f * c)) * mse.sum()) / S)


@dataclass(frozen=True)
class SampleAccounting:
    N: int
    S: int
    lower: float
    upper: float

    @property
    def ok(self) -> bool:
        return self.lower <= self.N <= self.upper


def sample_bounds(regime: Regime, S: int) -> tuple[float, float]:
    """Lower and upper bounds on the total sample count ``N`` after ``S`` iterations."""
    c3 = regime.c3
    if regime.kind == "increasing":
        return 2 * c3 * S ** 2, 4 * (c3 + 1) * S ** 2
    if regime.kind == "finite_horizon":
        return 4 * c3 * S ** 2, 4 * (c3 + 1) * S ** 2
    return (c3 * (S / 2 - 1) * math.log(S / 2) if S > 0 else 0.0,
            4 * S * (c3 * math.log((S + 1) / 2) + 1))


def sample_accounting(regime: Regime, S: int, N: int) -> SampleAccounting:
    lower, upper = sample_bounds(regime, S)
    return SampleAccounting(int(N), int(S), lower, upper)


def expected_sample_count(regime: Regime, S: int, floor_t: bool = False) -> int:
    """``sum_s (t_s + k_s + 2 J_s)`` from the size rule alone."""
    total = 0
    for s in range(S):
        t, k, J = iteration_sizes(regime, s, S, floor_t)
        total += t + k + 2 * J
    return total


def theory_rhs(problem: BilevelProblem, config: BSGMConfig, delta_f: float) -> float:
    """Right-hand side of the stationarity bound for the configured regime."""
    S = config.S
    if config.regime.kind == "deterministic":
        tb = compute_bounds(problem.constants)
        return deterministic_rhs(delta_f, tb.L_f, config.alpha, S, tb.C_det)
    tb = compute_bounds(problem.constants, config.schedule)
    if tb.c_b is None:
        raise ConfigurationError("stochastic regimes need a decreasing schedule for c_b, c_v")
    fn = increasing_rhs if config.regime.kind == "increasing" else finite_horizon_rhs
    return fn(delta_f, tb.L_f, config.alpha, S, tb.c_b, tb.c_v, config.regime.c3)


def delta_f(problem: BilevelProblem, lambda0, traces=()) -> tuple[float, str]:
    """``f(lambda0) - min f`` and its source: closed form or best value seen in ``traces``."""
    f0 = problem.f(lambda0)
    fmin = _safe(problem.min_f)
    if fmin is not None:
        return f0 - fmin, "closed-form"
    seen = [v for tr in traces for v in tr.f_values if v is not None]
    return f0 - min(seen + [f0]), "best-observed"
