"""Closed-form constants and error bounds computed from a :class:`ProblemConstants`.

Tests compare Monte Carlo quantities against these, so nothing here is
estimated from data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ProblemConstants
from .errors import ConfigurationError, DataError
from .solvers import (ConstantSchedule, DecreasingSchedule, RateFunctions, StepSchedule,
                      rate_functions, sigma2_tilde)


@dataclass(frozen=True)
class TheoryBounds:
    constants: ProblemConstants
    rates: RateFunctions
    L_w: float
    L_wprime: float
    L_f: float
    c1: float
    sigma2_tilde: float
    d_w: float | None
    d_v: float | None
    c_b: float | None
    c_v: float | None
    C_det: float

    # rates are re-exported so callers need only this object
    def rho(self, t: int) -> float:
        return self.rates.rho(t)

    def sigma(self, k: int) -> float:
        return self.rates.sigma(k)

    def _minibatch_term(self) -> float:
        c = self.constants
        return c.sigma2_E + 4.0 * (c.sigma2_p * (c.L_E ** 2 + c.sigma1_E)
                                   + c.L_Phi ** 2 * c.sigma1_E) / (1.0 - c.q) ** 2

    def bias_bound(self, t: int, k: int) -> float:
        """Upper bound on ``||E[g_hat] - grad f||``."""
        c = self.constants
        r, s = self.rho(t), self.sigma(k)
        return self.c1 * math.sqrt(r) + c.L_Phi * math.sqrt(s) + c.nu2 * math.sqrt(r * s)

    def var1_bound(self, t: int, k: int, J: int) -> float:
        """Upper bound on ``E[Var(g_hat | w_t)]``."""
        c = self.constants
        r, s = self.rho(t), self.sigma(k)
        return (self._minibatch_term() * 2.0 / J
                + 8.0 * (c.L_Phi ** 2 + c.sigma2_p) * s
                + 8.0 * c.nu2 ** 2 * r * (s + c.sigma1_E / (J * (1.0 - c.q) ** 2)))

    def var2_bound(self, t: int, k: int) -> float:
        """Upper bound on ``Var(E[g_hat | w_t])``."""
        c = self.constants
        r, s = self.rho(t), self.sigma(k)
        return 3.0 * (self.c1 ** 2 * r + c.L_Phi ** 2 * s + c.nu2 ** 2 * r * s)

    def mse_bound(self, t: int, k: int, J: int) -> float:
        """Four-term MSE bound of the SID estimator."""
        c = self.constants
        r, s = self.rho(t), self.sigma(k)
        one_q2 = (1.0 - c.q) ** 2
        return (self._minibatch_term() * 2.0 / J
                + (6.0 * self.c1 ** 2 + 8.0 * c.nu2 ** 2 * c.sigma1_E / one_q2) * r
                + (14.0 * c.L_Phi ** 2 + 8.0 * c.sigma2_p) * s
                + 14.0 * c.nu2 ** 2 * r * s)

    def corollary_bound(self, t: int) -> float:
        """``(c_b + c_v) / t`` for ``t = k = J`` under the decreasing schedule."""
        if self.c_b is None:
            raise ConfigurationError("c_b, c_v are defined for the decreasing schedule only")
        return (self.c_b + self.c_v) / t

    def det_error_bound(self, t: int) -> float:
        """``C_det * q^(2t)``: squared error of deterministic SID with unit steps."""
        return self.C_det * self.constants.q ** (2 * t)

    def to_dict(self) -> dict:
        out = {f"const.{k}": v for k, v in self.constants.to_dict().items()}
        out.update({"schedule." + k: v for k, v in self.rates.schedule.to_dict().items()})
        for key in ("L_w", "L_wprime", "L_f", "c1", "sigma2_tilde", "d_w", "d_v",
                    "c_b", "c_v", "C_det"):
            out[key] = getattr(self, key)
        return out


def compute_bounds(constants: ProblemConstants, schedule: StepSchedule | None = None
                   ) -> TheoryBounds:
    """Evaluate every theoretical constant for ``constants`` under ``schedule``.

    ``schedule`` defaults to unit constant steps, which is the deterministic
    setting.  ``d_w``, ``d_v``, ``c_b`` and ``c_v`` are ``None`` unless the
    schedule is decreasing.
    """
    c = constants
    if not 0 < c.q < 1:
        raise ConfigurationError("q must lie in (0, 1)")
    if schedule is None:
        schedule = ConstantSchedule(1.0)
    q = c.q
    one_q = 1.0 - q
    rates = rate_functions(c, schedule)

    L_w = c.L_Phi / one_q
    # Lipschitz constant of w'(lam) as displayed in the smoothness lemma.  The
    # appendix proof groups the nu2 term as (nu2 L_Phi/(1-q) + nu2_bar)/(1-q);
    # the two expressions coincide term by term.
    L_wprime = c.nu2_bar / one_q + c.L_Phi / one_q ** 2 * (c.nu2 + c.nu1_bar
                                                          + c.nu1 * c.L_Phi / one_q)
    L_f = c.mu2_bar + c.L_E * L_wprime + c.L_Phi / one_q * (c.mu2 + c.mu1_bar
                                                            + c.mu1 * c.L_Phi / one_q)
    c1 = c.mu2 + (c.mu1 * c.L_Phi + c.nu2 * c.L_E) / one_q + c.nu1 * c.L_E * c.L_Phi / one_q ** 2

    c_b = c_v = None
    if isinstance(schedule, DecreasingSchedule):
        d_w, d_v = rates.d_w, rates.d_v
        c_b = 3 * c1 ** 2 * d_w + 3 * c.L_Phi ** 2 * d_v + 3 * c.nu2 ** 2 * d_w * d_v
        c_v = (c.sigma2_E
               + 8 * (c.sigma2_p * (c.L_E ** 2 + c.sigma1_E) + c.L_Phi ** 2 * c.sigma1_E) / one_q ** 2
               + (3 * c1 ** 2 + 8 * c.nu2 ** 2 * c.sigma1_E / one_q ** 2) * d_w
               + (11 * c.L_Phi ** 2 + 8 * c.sigma2_p) * d_v
               + 11 * c.nu2 ** 2 * d_v * d_w)

    B2 = c.B ** 2
    C_det = (3 * c1 ** 2 * B2 + 3 * c.L_Phi ** 2 * c.L_E ** 2 / one_q ** 2
             + 3 * c.nu2 ** 2 * B2 * c.L_E ** 2 / one_q ** 2)

    return TheoryBounds(constants=c, rates=rates, L_w=L_w, L_wprime=L_wprime, L_f=L_f, c1=c1,
                        sigma2_tilde=sigma2_tilde(c), d_w=rates.d_w, d_v=rates.d_v,
                        c_b=c_b, c_v=c_v, C_det=C_det)


# ---------------------------------------------------------------------------
# Right-hand sides of the upper-level stationarity bounds
# ---------------------------------------------------------------------------


def increasing_rhs(delta_f: float, L_f: float, alpha: float, S: int, c_b: float, c_v: float,
                   c3: float) -> float:
    return (8 * delta_f + 10 / L_f * (c_b + c_v) / c3 * (math.log(S) + 1)) / (S * alpha)


def finite_horizon_rhs(delta_f: float, L_f: float, alpha: float, S: int, c_b: float,
                       c_v: float, c3: float) -> float:
    return (8 * delta_f + 10 / L_f * (c_b + c_v) / c3) / (S * alpha)


def deterministic_rhs(delta_f: float, L_f: float, alpha: float, S: int, C_det: float) -> float:
    return (8 * delta_f + 5 * C_det * math.pi ** 2 / (3 * L_f)) / (S * alpha)


# ---------------------------------------------------------------------------
# Rate fitting
# ---------------------------------------------------------------------------


def fit_decay_slope(points) -> tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``.

    Returns ``(slope, intercept, r_squared)``.  Needs at least three points,
    all with positive coordinates.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise DataError("need at least 3 (x, y) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise DataError("all x and y must be positive and finite")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise DataError("x values must not all be equal")
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), r2
