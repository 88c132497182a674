"""Stochastic implicit differentiation (SID) hypergradients and the BSGM bilevel optimiser
for problems whose lower level is the fixed point of a stochastic contraction."""
from .bounds import TheoryBounds, compute_bounds, fit_decay_slope
from .bsgm import (BSGMConfig, Regime, RunTrace, bsgm_run, inexact_pgd_bound, iteration_sizes,
                   replay_iteration, sample_accounting, stationarity_series)
from .core import (Ball, BilevelProblem, Box, FeasibleSet, FullSpace, ProblemConstants,
                   exact_hypergradient, exact_ls_solution, prox_grad_mapping, project)
from .errors import ConfigurationError, DataError, InvariantFailure, NumericalFailure
from .problems import (LinearQuadraticProblem, MetaLearningSyntheticProblem, RidgeHyperoptProblem,
                       list_problems, make_problem)
from .seeding import SeedStream
from .sid import SIDConfig, SIDOutput, estimate_mse, minibatch_grad_E, minibatch_jac2_vp, sid
from .solvers import (ConstantSchedule, DecreasingSchedule, km_ll, km_ls, rate_functions,
                      theorem_schedule)

__version__ = "0.1.0"
