"""Analytic benchmark problems with exact lower-level solutions and known constants.

* :class:`LinearQuadraticProblem`: linear contraction, quadratic upper level,
  Gaussian noise on the map, its Jacobians and the upper-level gradients.
* :class:`RidgeHyperoptProblem`: ridge-penalty selection where the lower level
  is one gradient-descent step on the ridge objective and the stochastic map
  uses a single training example (so the map variance grows away from the
  fixed point).
* :class:`MetaLearningSyntheticProblem`: block-separable linear-quadratic
  tasks sharing the upper-level variable, with optional task sub-sampling.

All constants are computed analytically.  Where the upper-level gradient is
only bounded on a compact set (quadratic ``E``), the constants refer to the
ball ``||w|| <= region_radius`` and :meth:`in_region` reports membership.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import brentq, minimize_scalar

from .core import (Ball, BilevelProblem, Box, FeasibleSet, FullSpace, ProblemConstants,
                   as_vector, feasible_set_from_dict)
from .errors import ConfigurationError


def _spectral_norm(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def _as_matrix(M, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(-1, 1) if cols in (None, 1) else M.reshape(1, -1)
    if rows is not None and M.shape[0] != rows:
        raise ConfigurationError(f"matrix has {M.shape[0]} rows, expected {rows}")
    if cols is not None and M.shape[1] != cols:
        raise ConfigurationError(f"matrix has {M.shape[1]} columns, expected {cols}")
    return M


def random_contraction(d: int, q: float, rng: np.random.Generator, spread: float = 0.7):
    """Symmetric ``d x d`` matrix with top eigenvalue ``q`` and the rest in ``[-spread q, spread q]``."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = rng.uniform(-spread * q, spread * q, size=d)
    eigs[0] = q
    return (Q * eigs) @ Q.T


# ---------------------------------------------------------------------------
# Linear-quadratic
# ---------------------------------------------------------------------------


class LinearQuadraticProblem(BilevelProblem):
    """``Phi(w, lam) = A w + Bmat lam + b`` and
    ``E(w, lam) = (E_scale/2) ||w - w_target||^2 + (ul_reg/2) ||lam - lambda_target||^2``.

    Noise model (all Gaussian).  One draw of the map is
    ``(A + s_J G1) w + (Bmat + s_J2 G2) lam + b + s_w z`` with standard normal
    ``G1``, ``G2``, ``z``; its Jacobians are ``A + s_J G1`` and ``Bmat + s_J2 G2``.
    Each oracle call draws only the product it returns, which has the same
    law and costs O(d).  Upper-level gradients get additive noise ``s_E``.
    """

    name = "linear-quadratic"

    def __init__(self, A, Bmat, b=None, w_target=None, ul_reg: float = 0.0, lambda_target=None,
                 E_scale: float = 1.0, noise_ll: float = 0.0, noise_jac: float = 0.0,
                 noise_jac2: float = 0.0, noise_E: float = 0.0,
                 feasible_set: FeasibleSet | None = None, lambda_radius: float | None = None,
                 region_radius: float | None = None, q: float | None = None, name: str | None = None):
        A = _as_matrix(A)
        d = A.shape[0]
        if A.shape != (d, d):
            raise ConfigurationError("A must be square")
        Bmat = np.asarray(Bmat, dtype=np.float64)
        Bmat = Bmat.reshape(d, -1) if Bmat.ndim < 2 else Bmat
        if Bmat.shape[0] != d:
            raise ConfigurationError(f"Bmat must have {d} rows")
        m = Bmat.shape[1]
        self.d, self.m = d, m
        self.A, self.Bmat = A, Bmat
        self.b = np.zeros(d) if b is None else np.broadcast_to(as_vector(b), (d,)).copy()
        self.w_target = (np.zeros(d) if w_target is None
                         else np.broadcast_to(as_vector(w_target), (d,)).copy())
        self.lambda_target = (np.zeros(m) if lambda_target is None
                              else np.broadcast_to(as_vector(lambda_target), (m,)).copy())
        for key, val in (("ul_reg", ul_reg), ("E_scale", E_scale), ("noise_ll", noise_ll),
                         ("noise_jac", noise_jac), ("noise_jac2", noise_jac2),
                         ("noise_E", noise_E)):
            if not val >= 0:
                raise ConfigurationError(f"{key} must be >= 0, got {val}")
        self.ul_reg, self.E_scale = float(ul_reg), float(E_scale)
        self.noise_ll, self.noise_jac = float(noise_ll), float(noise_jac)
        self.noise_jac2, self.noise_E = float(noise_jac2), float(noise_E)
        if name is not None:
            self.name = name

        self.feasible_set = FullSpace() if feasible_set is None else feasible_set
        lam_max = self.feasible_set.max_norm()
        if not math.isfinite(lam_max):
            if lambda_radius is None:
                raise ConfigurationError(
                    "unbounded feasible set: declare lambda_radius, the region of lambda "
                    "over which the constants are computed")
            lam_max = float(lambda_radius)
        self.lambda_radius = lam_max

        normA = _spectral_norm(A)
        if normA >= 1:
            raise ConfigurationError(f"Phi is not a contraction: ||A|| = {normA:.6g} >= 1")
        if q is None:
            q = normA
        elif q < normA - 1e-12:
            raise ConfigurationError(f"declared q={q} below ||A|| = {normA:.6g}")
        if not q > 0:
            raise ConfigurationError("A = 0: pass an explicit contraction factor q in (0, 1)")
        q = float(q)

        self._I_minus_A = np.eye(d) - A
        inv_norm = _spectral_norm(np.linalg.inv(self._I_minus_A))
        L_Phi = _spectral_norm(Bmat)
        B = inv_norm * (L_Phi * lam_max + float(np.linalg.norm(self.b)))

        sigma1 = d * (self.noise_ll ** 2 + 2 * self.noise_jac ** 2 * B ** 2
                      + self.noise_jac2 ** 2 * lam_max ** 2)
        sigma2 = 2 * d * self.noise_jac ** 2 / (1 - q) ** 2
        if region_radius is None:
            region_radius = 2 * B + 6 * math.sqrt(2 * sigma1 / (1 - q * q))
        self.region_radius = float(region_radius)
        L_E = self.E_scale * (self.region_radius + float(np.linalg.norm(self.w_target)))

        self.constants = ProblemConstants(
            q=q, mu1=self.E_scale, mu2_bar=self.ul_reg, L_E=L_E, L_Phi=L_Phi, B=B,
            sigma1=sigma1, sigma2=sigma2,
            sigma1_p=d * d * self.noise_jac ** 2, sigma2_p=d * m * self.noise_jac2 ** 2,
            sigma1_E=d * self.noise_E ** 2, sigma2_E=m * self.noise_E ** 2)

    # deterministic oracles
    def E(self, w, lam):
        w, lam = as_vector(w), as_vector(lam)
        return float(0.5 * self.E_scale * np.sum((w - self.w_target) ** 2)
                     + 0.5 * self.ul_reg * np.sum((lam - self.lambda_target) ** 2))

    def grad_E(self, w, lam):
        w, lam = as_vector(w), as_vector(lam)
        return self.E_scale * (w - self.w_target), self.ul_reg * (lam - self.lambda_target)

    def Phi(self, w, lam):
        return self.A @ as_vector(w) + self.Bmat @ as_vector(lam) + self.b

    def jac1_Phi_T_vp(self, w, lam, v):
        return self.A.T @ as_vector(v)

    def jac2_Phi_T_vp(self, w, lam, v):
        return self.Bmat.T @ as_vector(v)

    # stochastic oracles (hot paths: inputs are assumed to be float vectors already)
    def _map_noise_scale(self, w, lam) -> float:
        var = self.noise_ll ** 2
        if self.noise_jac:
            var += self.noise_jac ** 2 * float(w @ w)
        if self.noise_jac2:
            var += self.noise_jac2 ** 2 * float(lam @ lam)
        return math.sqrt(var)

    def sample_Phi(self, w, lam, rng):
        out = self.A @ w + self.Bmat @ lam + self.b
        scale = self._map_noise_scale(w, lam)
        if scale > 0:
            out += scale * rng.standard_normal(self.d)
        return out

    def sample_jac1_Phi_T_vp(self, w, lam, v, rng):
        out = self.A.T @ v
        if self.noise_jac > 0:
            out += self.noise_jac * math.sqrt(float(v @ v)) * rng.standard_normal(self.d)
        return out

    def sample_jac2_Phi_T_vp(self, w, lam, v, rng):
        v = as_vector(v)
        out = self.Bmat.T @ v
        if self.noise_jac2 > 0:
            out = out + self.noise_jac2 * float(np.linalg.norm(v)) * rng.standard_normal(self.m)
        return out

    def sample_grad_E(self, w, lam, rng):
        g1, g2 = self.grad_E(w, lam)
        if self.noise_E > 0:
            z = rng.standard_normal(self.d + self.m)
            g1 = g1 + self.noise_E * z[:self.d]
            g2 = g2 + self.noise_E * z[self.d:]
        return g1, g2

    def sample_grad_E_batch(self, w, lam, J, rng):
        g1, g2 = self.grad_E(w, lam)
        if self.noise_E > 0:
            z = rng.standard_normal((J, self.d + self.m)).mean(axis=0)
            g1 = g1 + self.noise_E * z[:self.d]
            g2 = g2 + self.noise_E * z[self.d:]
        return g1, g2

    def sample_jac2_Phi_T_vp_batch(self, w, lam, v, J, rng):
        v = as_vector(v)
        out = self.Bmat.T @ v
        if self.noise_jac2 > 0:
            z = rng.standard_normal((J, self.m)).mean(axis=0)
            out = out + self.noise_jac2 * float(np.linalg.norm(v)) * z
        return out

    # side oracles
    def exact_ll(self, lam):
        return np.linalg.solve(self._I_minus_A, self.Bmat @ as_vector(lam) + self.b)

    def closed_form_hypergradient(self, lam):
        """``ul_reg (lam - lambda_target) + Bmat^T (I - A^T)^{-1} E_scale (w(lam) - w_target)``."""
        lam = as_vector(lam)
        w = self.exact_ll(lam)
        v = np.linalg.solve(self._I_minus_A.T, self.E_scale * (w - self.w_target))
        return self.ul_reg * (lam - self.lambda_target) + self.Bmat.T @ v

    def in_region(self, w):
        return float(np.linalg.norm(w)) <= self.region_radius

    def _quadratic_form(self):
        """``f(lam) = 0.5 lam^T H lam + g^T lam + const``."""
        M = np.linalg.solve(self._I_minus_A, self.Bmat)
        c0 = np.linalg.solve(self._I_minus_A, self.b)
        H = self.E_scale * M.T @ M + self.ul_reg * np.eye(self.m)
        g = self.E_scale * M.T @ (c0 - self.w_target) - self.ul_reg * self.lambda_target
        return H, g

    def argmin_lambda(self) -> np.ndarray:
        """Minimiser of ``f`` over the feasible set (``f`` is a convex quadratic)."""
        H, g = self._quadratic_form()
        fs = self.feasible_set
        if isinstance(fs, FullSpace):
            return np.linalg.lstsq(H, -g, rcond=None)[0]
        if isinstance(fs, Ball):
            return _ball_qp(H, g, fs.center, fs.radius)
        return _projected_qp(H, g, fs)

    def min_f(self):
        return self.f(self.argmin_lambda())

    def deterministic(self) -> "LinearQuadraticProblem":
        """Copy with every noise level set to zero."""
        return LinearQuadraticProblem(
            self.A, self.Bmat, self.b, self.w_target, self.ul_reg, self.lambda_target,
            self.E_scale, feasible_set=self.feasible_set, lambda_radius=self.lambda_radius,
            region_radius=self.region_radius, q=self.constants.q, name=self.name)

    def describe(self):
        out = super().describe()
        out.update(noise_ll=self.noise_ll, noise_jac=self.noise_jac, noise_jac2=self.noise_jac2,
                   noise_E=self.noise_E, ul_reg=self.ul_reg, region_radius=self.region_radius,
                   feasible_set=self.feasible_set.to_dict())
        return out


def _ball_qp(H, g, center, radius):
    """Minimise ``0.5 x^T H x + g^T x`` over ``||x - center|| <= radius`` (H psd)."""
    # shift to u = x - center: 0.5 u^T H u + (g + H c)^T u
    h = g + H @ center
    evals, evecs = np.linalg.eigh(H)
    hc = evecs.T @ h
    if evals[0] > 1e-14 * max(1.0, evals[-1]):
        u = -evecs @ (hc / evals)
        if np.linalg.norm(u) <= radius:
            return center + u

    def norm_minus_r(nu):
        return float(np.linalg.norm(hc / (evals + nu))) - radius

    lo = max(0.0, -evals[0]) + 1e-300
    if norm_minus_r(lo) <= 0:
        # hard case cannot occur for convex H with the interior minimiser rejected
        lo = 0.0
    hi = max(1.0, float(np.linalg.norm(h)) / radius)
    while norm_minus_r(hi) > 0:
        hi *= 2
    nu = brentq(norm_minus_r, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=500)
    return center - evecs @ (hc / (evals + nu))


def _projected_qp(H, g, fs: FeasibleSet, tol: float = 1e-14, max_iter: int = 1_000_000):
    L = max(float(np.linalg.eigvalsh(H)[-1]), 1e-300)
    x = fs.project(np.linalg.lstsq(H, -g, rcond=None)[0])
    for _ in range(max_iter):
        nxt = fs.project(x - (H @ x + g) / L)
        if np.linalg.norm(nxt - x) <= tol * (1 + np.linalg.norm(x)):
            return nxt
        x = nxt
    return x


def make_linear_quadratic(d: int = 5, m: int = 2, q: float = 0.7, ul_reg: float = 0.1,
                          noise_ll: float = 0.0, noise_jac: float = 0.0, noise_jac2: float = 0.0,
                          noise_E: float = 0.0, b_scale: float = 1.0, target_scale: float = 1.0,
                          feasible_set=None, lambda_radius=None, region_radius=None,
                          A=None, Bmat=None, b=None, w_target=None, lambda_target=None,
                          seed: int = 0) -> LinearQuadraticProblem:
    rng = np.random.default_rng(seed)
    if A is None:
        if not 0 < q < 1:
            raise ConfigurationError(f"q must lie in (0, 1), got {q}")
        A = random_contraction(d, q, rng)
        q_decl = q
    else:
        A = _as_matrix(A)
        d = A.shape[0]
        q_decl = None
    if Bmat is None:
        Bmat = rng.standard_normal((d, m)) / math.sqrt(m)
    if b is None:
        b = b_scale * rng.standard_normal(d)
    if w_target is None:
        w_target = target_scale * rng.standard_normal(d)
    fs = (Ball(np.zeros(np.asarray(Bmat).reshape(d, -1).shape[1]), 2.0) if feasible_set is None
          else feasible_set_from_dict(feasible_set, np.asarray(Bmat).reshape(d, -1).shape[1]))
    return LinearQuadraticProblem(A, Bmat, b, w_target, ul_reg, lambda_target,
                                  noise_ll=noise_ll, noise_jac=noise_jac, noise_jac2=noise_jac2,
                                  noise_E=noise_E, feasible_set=fs, lambda_radius=lambda_radius,
                                  region_radius=region_radius, q=q_decl)


# ---------------------------------------------------------------------------
# Ridge hyperparameter selection
# ---------------------------------------------------------------------------


class RidgeHyperoptProblem(BilevelProblem):
    """Choose the ridge penalty ``lam`` in ``[lambda_min, lambda_max]``.

    Lower level: ``Phi(w, lam) = w - eta (H w - c + lam w)`` with
    ``H = X^T X / n`` and ``c = X^T y / n``; its fixed point is the ridge
    solution ``(H + lam I)^{-1} c``.  A stochastic map draw uses one training
    example.  Upper level: half the mean squared validation error; a draw uses
    one validation example.
    """

    name = "ridge-hyperopt"

    def __init__(self, X, y, X_val, y_val, lambda_min: float, lambda_max: float,
                 eta_gd: float | None = None, region_radius: float | None = None):
        X, X_val = np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(X_val, float))
        y, y_val = as_vector(y), as_vector(y_val)
        if X.shape[0] != y.shape[0] or X_val.shape[0] != y_val.shape[0]:
            raise ConfigurationError("X/y row counts differ")
        if X.shape[1] != X_val.shape[1]:
            raise ConfigurationError("training and validation features differ")
        if not 0 < lambda_min <= lambda_max:
            raise ConfigurationError(
                f"need 0 < lambda_min <= lambda_max, got [{lambda_min}, {lambda_max}]")
        self.X, self.y, self.X_val, self.y_val = X, y, X_val, y_val
        n, p = X.shape
        self.d, self.m = p, 1
        self.H = X.T @ X / n
        self.c = X.T @ y / n
        self.H_val = X_val.T @ X_val / X_val.shape[0]
        self.c_val = X_val.T @ y_val / X_val.shape[0]
        self.lambda_min, self.lambda_max = float(lambda_min), float(lambda_max)
        self.feasible_set = Box(np.array([lambda_min]), np.array([lambda_max]))

        h = np.linalg.eigvalsh(self.H)
        lo, hi = h[0] + lambda_min, h[-1] + lambda_max
        if eta_gd is None:
            eta_gd = 2.0 / (lo + hi)
        if not eta_gd > 0:
            raise ConfigurationError(f"eta_gd must be > 0, got {eta_gd}")
        q = max(abs(1 - eta_gd * lo), abs(1 - eta_gd * hi))
        if q >= 1:
            raise ConfigurationError(
                f"eta_gd={eta_gd} violates the contraction bound eta_gd < 2/(h_max + lambda_max)"
                f" = {2.0 / hi:.6g}")
        self.eta = float(eta_gd)
        eta = self.eta

        B = float(np.linalg.norm(self.exact_ll(lambda_min)))
        if region_radius is None:
            region_radius = 2 * B + 1
        self.region_radius = R = float(region_radius)
        xn2 = np.sum(X ** 2, axis=1)
        xvn2 = np.sum(X_val ** 2, axis=1)
        sigma1 = 2 * eta ** 2 * float(np.mean(xn2 * (np.sqrt(xn2) * B + np.abs(y)) ** 2))
        sigma2 = 2 * float(np.mean(xn2 ** 2)) / lo ** 2
        outer = X[:, :, None] * X[:, None, :]
        sigma1_p = eta ** 2 * float(np.mean(np.sum((outer - self.H) ** 2, axis=(1, 2))))
        sigma1_E = float(np.mean(xvn2 * (np.sqrt(xvn2) * R + np.abs(y_val)) ** 2))
        mu1 = _spectral_norm(self.H_val)
        L_E = mu1 * R + float(np.linalg.norm(self.c_val))
        self.constants = ProblemConstants(
            q=float(q), nu2=eta, nu1_bar=eta, mu1=mu1, L_E=L_E, L_Phi=eta * B, B=B,
            sigma1=sigma1, sigma2=float(sigma2), sigma1_p=sigma1_p, sigma1_E=sigma1_E)

    def E(self, w, lam):
        r = self.X_val @ as_vector(w) - self.y_val
        return float(0.5 * np.mean(r ** 2))

    def grad_E(self, w, lam):
        return self.H_val @ as_vector(w) - self.c_val, np.zeros(1)

    def Phi(self, w, lam):
        w = as_vector(w)
        lam = float(as_vector(lam)[0])
        return w - self.eta * (self.H @ w - self.c + lam * w)

    def jac1_Phi_T_vp(self, w, lam, v):
        v = as_vector(v)
        lam = float(as_vector(lam)[0])
        return v - self.eta * (self.H @ v + lam * v)

    def jac2_Phi_T_vp(self, w, lam, v):
        return np.array([-self.eta * float(as_vector(w) @ as_vector(v))])

    def sample_Phi(self, w, lam, rng):
        w = as_vector(w)
        lam = float(as_vector(lam)[0])
        j = rng.integers(self.X.shape[0])
        x = self.X[j]
        return w - self.eta * (x * (x @ w - self.y[j]) + lam * w)

    def sample_jac1_Phi_T_vp(self, w, lam, v, rng):
        v = as_vector(v)
        lam = float(as_vector(lam)[0])
        x = self.X[rng.integers(self.X.shape[0])]
        return v - self.eta * (x * (x @ v) + lam * v)

    def sample_jac2_Phi_T_vp(self, w, lam, v, rng):
        # d2Phi = -eta w does not depend on the training example
        return self.jac2_Phi_T_vp(w, lam, v)

    def sample_jac2_Phi_T_vp_batch(self, w, lam, v, J, rng):
        return self.jac2_Phi_T_vp(w, lam, v)

    def sample_grad_E(self, w, lam, rng):
        j = rng.integers(self.X_val.shape[0])
        x = self.X_val[j]
        return x * (x @ as_vector(w) - self.y_val[j]), np.zeros(1)

    def sample_grad_E_batch(self, w, lam, J, rng):
        idx = rng.integers(self.X_val.shape[0], size=J)
        Xb = self.X_val[idx]
        g1 = Xb.T @ (Xb @ as_vector(w) - self.y_val[idx]) / J
        return g1, np.zeros(1)

    def exact_ll(self, lam):
        lam = float(as_vector(lam)[0])
        return np.linalg.solve(self.H + lam * np.eye(self.d), self.c)

    def closed_form_hypergradient(self, lam):
        """``-w(lam)^T (H + lam I)^{-1} grad_1 E(w(lam))``."""
        lam_f = float(as_vector(lam)[0])
        w = self.exact_ll(lam_f)
        u = np.linalg.solve(self.H + lam_f * np.eye(self.d), self.H_val @ w - self.c_val)
        return np.array([-float(w @ u)])

    def in_region(self, w):
        return float(np.linalg.norm(w)) <= self.region_radius

    def argmin_lambda(self) -> np.ndarray:
        grid = np.linspace(self.lambda_min, self.lambda_max, 201)
        vals = [self.f(g) for g in grid]
        i = int(np.argmin(vals))
        best_x, best_v = grid[i], vals[i]
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        if hi > lo:
            res = minimize_scalar(lambda x: self.f(x), bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-12})
            if res.fun < best_v:
                best_x, best_v = res.x, res.fun
        return np.array([best_x])

    def min_f(self):
        return self.f(self.argmin_lambda())

    def describe(self):
        out = super().describe()
        out.update(n_train=self.X.shape[0], n_val=self.X_val.shape[0], eta_gd=self.eta,
                   lambda_min=self.lambda_min, lambda_max=self.lambda_max,
                   region_radius=self.region_radius)
        return out


def make_ridge(n_train: int = 40, n_val: int = 40, p: int = 2, label_noise: float = 0.1,
               lambda_min: float = 0.5, lambda_max: float = 4.0, eta_gd=None, region_radius=None,
               X=None, y=None, X_val=None, y_val=None, seed: int = 0) -> RidgeHyperoptProblem:
    """Synthetic ridge problem; with low label noise the optimal penalty is ``lambda_min``."""
    rng = np.random.default_rng(seed)
    if X is None or y is None:
        w_true = rng.standard_normal(p)
        w_true /= np.linalg.norm(w_true)
        X = rng.standard_normal((n_train, p))
        y = X @ w_true + label_noise * rng.standard_normal(n_train)
        if X_val is None or y_val is None:
            X_val = rng.standard_normal((n_val, p))
            y_val = X_val @ w_true + label_noise * rng.standard_normal(n_val)
    if X_val is None or y_val is None:
        X_val, y_val = X, y
    return RidgeHyperoptProblem(X, y, X_val, y_val, lambda_min, lambda_max, eta_gd, region_radius)


# ---------------------------------------------------------------------------
# Meta-learning
# ---------------------------------------------------------------------------


class MetaLearningSyntheticProblem(LinearQuadraticProblem):
    """``T`` independent linear-quadratic tasks sharing ``lam``.

    ``w`` stacks the task blocks, so ``Phi`` is block diagonal and ``f`` is the
    sum of the per-task validation losses plus the shared regulariser.  With
    ``tasks_per_iteration < T`` an optimiser may instead work on the rescaled
    sub-problem of a random task subset, drawn without replacement.
    """

    name = "meta-synthetic"

    def __init__(self, tasks, ul_reg: float = 0.0, lambda_target=None, noise_ll: float = 0.0,
                 noise_E: float = 0.0, feasible_set=None, lambda_radius=None, region_radius=None,
                 tasks_per_iteration: int | None = None, E_scale: float = 1.0):
        tasks = [tuple(t) for t in tasks]
        if not tasks:
            raise ConfigurationError("need at least one task")
        self.tasks = tasks
        self.T = len(tasks)
        if tasks_per_iteration is None:
            tasks_per_iteration = self.T
        if not 1 <= tasks_per_iteration <= self.T:
            raise ConfigurationError(f"tasks_per_iteration must lie in [1, {self.T}]")
        self.tasks_per_iteration = int(tasks_per_iteration)
        A = block_diag(*[_as_matrix(t[0]) for t in tasks])
        Bmat = np.vstack([np.asarray(t[1], float).reshape(_as_matrix(t[0]).shape[0], -1)
                          for t in tasks])
        b = np.concatenate([as_vector(t[2]) for t in tasks])
        target = np.concatenate([as_vector(t[3]) for t in tasks])
        sizes = [_as_matrix(t[0]).shape[0] for t in tasks]
        self.block_slices = [slice(s - n, s) for s, n in zip(np.cumsum(sizes), sizes)]
        self._init_kwargs = dict(ul_reg=ul_reg, lambda_target=lambda_target, noise_ll=noise_ll,
                                 noise_E=noise_E, lambda_radius=lambda_radius,
                                 region_radius=region_radius)
        super().__init__(A, Bmat, b, target, ul_reg, lambda_target, E_scale=E_scale,
                         noise_ll=noise_ll, noise_E=noise_E, feasible_set=feasible_set,
                         lambda_radius=lambda_radius, region_radius=region_radius)
        self._base_feasible_set = self.feasible_set

    def task_loss(self, i: int, lam) -> float:
        """Validation loss ``f_i(lam)`` of task ``i`` (without the shared regulariser)."""
        w = self.exact_ll(lam)[self.block_slices[i]]
        return float(0.5 * self.E_scale * np.sum((w - self.w_target[self.block_slices[i]]) ** 2))

    def restrict(self, idx) -> LinearQuadraticProblem:
        """Sub-problem on tasks ``idx`` with the task losses scaled by ``T/len(idx)``.

        Its hypergradient is an unbiased estimate of the full one when ``idx``
        is a uniformly random subset of fixed size.
        """
        idx = sorted(int(i) for i in idx)
        kw = self._init_kwargs
        return LinearQuadraticProblem(
            block_diag(*[_as_matrix(self.tasks[i][0]) for i in idx]),
            np.vstack([self.Bmat[self.block_slices[i]] for i in idx]),
            np.concatenate([self.b[self.block_slices[i]] for i in idx]),
            np.concatenate([self.w_target[self.block_slices[i]] for i in idx]),
            kw["ul_reg"], kw["lambda_target"], E_scale=self.E_scale * self.T / len(idx),
            noise_ll=kw["noise_ll"], noise_E=kw["noise_E"], feasible_set=self.feasible_set,
            lambda_radius=self.lambda_radius, q=self.constants.q,
            name=f"{self.name}[{','.join(map(str, idx))}]")

    def sample_task_subproblem(self, rng) -> BilevelProblem:
        if self.tasks_per_iteration == self.T:
            return self
        idx = rng.choice(self.T, size=self.tasks_per_iteration, replace=False)
        return self.restrict(idx)

    def deterministic(self):
        kw = dict(self._init_kwargs, noise_ll=0.0, noise_E=0.0)
        return MetaLearningSyntheticProblem(self.tasks, feasible_set=self.feasible_set,
                                            tasks_per_iteration=self.tasks_per_iteration,
                                            E_scale=self.E_scale, **kw)

    def describe(self):
        out = super().describe()
        out.update(T=self.T, tasks_per_iteration=self.tasks_per_iteration)
        return out


def make_meta(T: int = 4, d_task: int = 3, m: int = 2, q: float = 0.7, ul_reg: float = 0.1,
              noise_ll: float = 0.0, noise_E: float = 0.0, tasks_per_iteration=None,
              feasible_set=None, lambda_radius=None, region_radius=None,
              seed: int = 0) -> MetaLearningSyntheticProblem:
    if not 0 < q < 1:
        raise ConfigurationError(f"q must lie in (0, 1), got {q}")
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(int(T)):
        A = random_contraction(d_task, q, rng)
        tasks.append((A, rng.standard_normal((d_task, m)) / math.sqrt(m),
                      rng.standard_normal(d_task), rng.standard_normal(d_task)))
    fs = Ball(np.zeros(m), 2.0) if feasible_set is None else feasible_set_from_dict(feasible_set, m)
    return MetaLearningSyntheticProblem(tasks, ul_reg=ul_reg, noise_ll=noise_ll, noise_E=noise_E,
                                        feasible_set=fs, lambda_radius=lambda_radius,
                                        region_radius=region_radius,
                                        tasks_per_iteration=tasks_per_iteration)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

# name -> (factory, {parameter: (default, description)})
REGISTRY = {
    "linear-quadratic": (make_linear_quadratic, {
        "d": (5, "lower-level dimension"),
        "m": (2, "upper-level dimension"),
        "q": (0.7, "contraction factor: top eigenvalue of the random symmetric A, in (0, 1)"),
        "ul_reg": (0.1, "upper-level ridge weight on lam"),
        "noise_ll": (0.0, "std of additive noise on the map"),
        "noise_jac": (0.0, "std of entrywise noise on d1Phi"),
        "noise_jac2": (0.0, "std of entrywise noise on d2Phi"),
        "noise_E": (0.0, "std of additive noise on the upper-level gradients"),
        "b_scale": (1.0, "scale of the random offset b"),
        "target_scale": (1.0, "scale of the random target w_target"),
        "feasible_set": (None, "feasible set spec; default ball of radius 2 at 0"),
        "lambda_radius": (None, "bound on ||lam|| when the feasible set is unbounded"),
        "region_radius": (None, "radius of the w-region where L_E holds"),
        "A": (None, "explicit d x d matrix (overrides d, q)"),
        "Bmat": (None, "explicit d x m matrix"),
        "b": (None, "explicit offset"),
        "w_target": (None, "explicit target"),
        "lambda_target": (None, "centre of the upper-level ridge term"),
    }),
    "ridge-hyperopt": (make_ridge, {
        "n_train": (40, "training examples"),
        "n_val": (40, "validation examples"),
        "p": (2, "features"),
        "label_noise": (0.1, "std of label noise"),
        "lambda_min": (0.5, "lower end of the penalty box, > 0"),
        "lambda_max": (4.0, "upper end of the penalty box"),
        "eta_gd": (None, "gradient step of the lower-level map; default 2/(h_min+h_max+box ends)"),
        "region_radius": (None, "radius of the w-region where L_E holds; default 2B+1"),
        "X": (None, "explicit training inputs"),
        "y": (None, "explicit training labels"),
        "X_val": (None, "explicit validation inputs (default: training inputs)"),
        "y_val": (None, "explicit validation labels"),
    }),
    "meta-synthetic": (make_meta, {
        "T": (4, "number of tasks"),
        "d_task": (3, "lower-level dimension per task"),
        "m": (2, "shared upper-level dimension"),
        "q": (0.7, "contraction factor of every task"),
        "ul_reg": (0.1, "upper-level ridge weight"),
        "noise_ll": (0.0, "std of additive noise on the map"),
        "noise_E": (0.0, "std of additive noise on the upper-level gradients"),
        "tasks_per_iteration": (None, "tasks sampled per optimiser step; default all"),
        "feasible_set": (None, "feasible set spec; default ball of radius 2 at 0"),
        "lambda_radius": (None, "bound on ||lam|| when the feasible set is unbounded"),
        "region_radius": (None, "radius of the w-region where L_E holds"),
    }),
}


def list_problems() -> dict:
    return {name: {k: {"default": v[0], "description": v[1]} for k, v in params.items()}
            for name, (_, params) in REGISTRY.items()}


def make_problem(name: str, parameters: dict | None = None, seed: int = 0) -> BilevelProblem:
    """Build a registered benchmark; data generation is deterministic in ``seed``."""
    if name not in REGISTRY:
        raise ConfigurationError(f"unknown problem {name!r}; known: {sorted(REGISTRY)}")
    factory, schema = REGISTRY[name]
    parameters = dict(parameters or {})
    unknown = set(parameters) - set(schema)
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    return factory(seed=seed, **parameters)
