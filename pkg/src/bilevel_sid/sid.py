"""Stochastic implicit differentiation (SID) hypergradient estimator.

One call runs four stages on mutually independent random streams:

1. ``t`` stochastic fixed-point steps for the lower level, giving ``w_t``;
2. a size-``J`` mini-batch of upper-level gradients at ``w_t`` (one noise draw
   yields both partials);
3. ``k`` stochastic fixed-point steps on the adjoint system with the
   mini-batch ``grad_1`` frozen as right-hand side, giving ``v_k``;
4. a size-``J`` mini-batch of ``d2Phi_hat(w_t)^T v_k`` products.

The estimate is ``grad_2 E_bar + d2Phi_bar^T v_k``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import BilevelProblem, as_vector, exact_hypergradient
from .errors import ConfigurationError
from .seeding import SeedStream, as_generator, split_streams
from .solvers import StepSchedule, km_ll, km_ls


@dataclass(frozen=True)
class SIDConfig:
    t: int
    k: int
    J: int
    schedule: StepSchedule
    w0: np.ndarray | None = None
    v0: np.ndarray | None = None
    strict: bool = True

    def __post_init__(self):
        if self.t < 0 or self.k < 0:
            raise ConfigurationError("t and k must be >= 0")
        if self.J < 1:
            raise ConfigurationError("mini-batch size J must be >= 1")


@dataclass
class SIDOutput:
    hypergradient: np.ndarray
    w_t: np.ndarray
    v_k: np.ndarray
    grad1_E_bar: np.ndarray
    grad2_E_bar: np.ndarray
    samples_zeta: int
    samples_xi: int
    w_in_region: bool = True


def minibatch_grad_E(problem: BilevelProblem, w, lam, J: int, rng):
    """Average of ``J`` draws of ``(grad_1 E_hat, grad_2 E_hat)`` sharing each draw."""
    if J < 1:
        raise ConfigurationError("mini-batch size J must be >= 1")
    return problem.sample_grad_E_batch(as_vector(w), as_vector(lam), J, as_generator(rng))


def minibatch_jac2_vp(problem: BilevelProblem, w, lam, v, J: int, rng):
    """Average of ``J`` independent draws of ``d2Phi_hat(w, lam)^T v``."""
    if J < 1:
        raise ConfigurationError("mini-batch size J must be >= 1")
    return problem.sample_jac2_Phi_T_vp_batch(
        as_vector(w), as_vector(lam), as_vector(v), J, as_generator(rng))


def sid(problem: BilevelProblem, lam, config: SIDConfig, rng) -> SIDOutput:
    """Run the SID estimator at ``lam``.

    ``rng`` is a :class:`~bilevel_sid.seeding.SeedStream`, a numpy Generator,
    or a sequence of four generator-like objects (one per stage).
    """
    lam = as_vector(lam)
    s_ll, s_ul, s_ls, s_jac = split_streams(rng, 4)
    cfg = config
    w_t, n_ll = km_ll(problem, lam, cfg.w0, cfg.t, cfg.schedule, s_ll, strict=cfg.strict)
    g1, g2 = minibatch_grad_E(problem, w_t, lam, cfg.J, s_ul)
    v_k, n_ls = km_ls(problem, lam, w_t, g1, cfg.v0, cfg.k, cfg.schedule, s_ls,
                      strict=cfg.strict)
    jv = minibatch_jac2_vp(problem, w_t, lam, v_k, cfg.J, s_jac)
    return SIDOutput(
        hypergradient=g2 + jv,
        w_t=w_t,
        v_k=v_k,
        grad1_E_bar=g1,
        grad2_E_bar=g2,
        samples_zeta=n_ll + n_ls + cfg.J,
        samples_xi=cfg.J,
        w_in_region=problem.in_region(w_t),
    )


@dataclass
class MSEEstimate:
    """Monte Carlo moments of an estimator around a reference value.

    ``variance`` is ``mse - bias_sq``; ``variance_direct`` is the mean squared
    deviation from the sample mean, kept as a cross-check (the two agree up to
    rounding).  ``stderr`` is the standard error of ``mse``.
    """

    mse: float
    bias_sq: float
    variance: float
    stderr: float
    variance_direct: float
    repeats: int
    mean: np.ndarray
    all_in_region: bool = True

    def __iter__(self):
        return iter((self.mse, self.bias_sq, self.variance, self.stderr))


def sample_moments(estimates, truth) -> MSEEstimate:
    est = np.asarray(estimates, dtype=np.float64)
    if est.ndim == 1:
        est = est[:, None]
    if est.shape[0] < 2:
        raise ConfigurationError("need at least 2 repeats")
    truth = as_vector(truth)
    sq_err = np.sum((est - truth) ** 2, axis=1)
    mean = est.mean(axis=0)
    mse = float(sq_err.mean())
    bias_sq = float(np.sum((mean - truth) ** 2))
    variance_direct = float(np.mean(np.sum((est - mean) ** 2, axis=1)))
    stderr = float(sq_err.std(ddof=1) / np.sqrt(len(sq_err)))
    return MSEEstimate(mse=mse, bias_sq=bias_sq, variance=mse - bias_sq, stderr=stderr,
                       variance_direct=variance_direct, repeats=len(sq_err), mean=mean)


def repeat_streams(rng, repeats: int) -> list:
    if isinstance(rng, SeedStream):
        return [rng.child(r) for r in range(repeats)]
    if isinstance(rng, np.random.Generator):
        return rng.spawn(repeats)
    raise TypeError("rng must be a SeedStream or numpy Generator")


def run_repeats(problem, lam, config: SIDConfig, streams, threads: int = 1) -> list[SIDOutput]:
    """SID at ``lam`` once per stream, results in stream order."""
    def one(stream):
        return sid(problem, lam, config, stream)

    if threads <= 1:
        return [one(s) for s in streams]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, streams))


def estimate_mse(problem: BilevelProblem, lam, config: SIDConfig, repeats: int, rng,
                 threads: int = 1, truth=None) -> MSEEstimate:
    """Monte Carlo MSE, squared bias and variance of SID at ``lam``.

    ``truth`` defaults to :func:`exact_hypergradient`.  Repeat ``r`` uses its
    own stream, so the result does not depend on ``threads``.
    """
    if repeats < 2:
        raise ConfigurationError("estimate_mse needs repeats >= 2")
    lam = as_vector(lam)
    if truth is None:
        truth = exact_hypergradient(problem, lam)
    outs = run_repeats(problem, lam, config, repeat_streams(rng, repeats), threads)
    est = sample_moments([o.hypergradient for o in outs], truth)
    est.all_in_region = all(o.w_in_region for o in outs)
    return est


@dataclass
class VarianceSplit:
    """Two-level Monte Carlo split of the estimator's variance around ``w_t``.

    ``var1`` estimates ``E[Var(g_hat | w_t)]`` and ``var2`` estimates
    ``Var(E[g_hat | w_t])`` (bias-corrected for the finite inner sample).
    ``bias_norm`` is ``||mean(g_hat) - truth||``; the ``*_se`` fields are
    standard errors.
    """

    var1: float
    var1_se: float
    var2: float
    var2_se: float
    bias_norm: float
    bias_se: float
    groups: int
    inner: int


def grouped_streams(stream: SeedStream, group: int, inner: int) -> list:
    """Four-stream sets for ``inner`` SID calls sharing the lower-level stream of ``group``."""
    shared = stream.child(group, 0, 1).generator
    return [[shared(), *(stream.child(group, r, j).generator() for j in (2, 3, 4))]
            for r in range(inner)]


def estimate_variance_split(problem: BilevelProblem, lam, config: SIDConfig, groups: int,
                            inner: int, stream: SeedStream, truth=None,
                            threads: int = 1) -> VarianceSplit:
    """Estimate the conditional variance terms by grouping repeats on a shared ``w_t``.

    Group ``g`` reuses one lower-level stream for its ``inner`` calls, so
    they see the same ``w_t`` and differ only in steps 2-4.
    """
    if groups < 2 or inner < 2:
        raise ConfigurationError("need at least 2 groups and 2 repeats per group")
    lam = as_vector(lam)
    if truth is None:
        truth = exact_hypergradient(problem, lam)
    streams = [s for g in range(groups) for s in grouped_streams(stream, g, inner)]
    outs = run_repeats(problem, lam, config, streams, threads)
    est = np.array([o.hypergradient for o in outs]).reshape(groups, inner, -1)
    means = est.mean(axis=1)
    within = np.sum(est.var(axis=1, ddof=1), axis=1)  # trace of the within-group covariance
    var1 = float(within.mean())
    grand = means.mean(axis=0)
    dev = np.sum((means - grand) ** 2, axis=1)
    var2 = float(dev.sum() / (groups - 1) - var1 / inner)
    flat = est.reshape(groups * inner, -1)
    bias = float(np.linalg.norm(flat.mean(axis=0) - truth))
    # group means are independent, so they carry the standard error of the overall mean
    bias_se = float(np.sqrt(np.sum(means.var(axis=0, ddof=1)) / groups))
    return VarianceSplit(var1=var1, var1_se=float(within.std(ddof=1) / np.sqrt(groups)),
                         var2=var2, var2_se=float(dev.std(ddof=1) / np.sqrt(groups)),
                         bias_norm=bias, bias_se=bias_se, groups=groups, inner=inner)
