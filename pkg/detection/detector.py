"""
Decision rules for model change detection.

The empirical difference test thresholds the norm of the difference between
the two maximum likelihood estimates. For the linear family the generalized
likelihood ratio is available exactly through a norm-constrained least
squares solve, and the quadratic upper bound that links the two tests is
exposed for diagnostics.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, optimize

from . import numstat
from .exceptions import (
    ConvergenceFailure,
    DimensionMismatch,
    DomainError,
    RootBracketFailure,
    SingularDesign,
    SingularFisher,
    UnresolvedThreshold,
)
from .families import Family

logger = logging.getLogger(__name__)

SECULAR_TOL = 1e-10
MAX_DOUBLINGS = 200
NEWTON_POLISH_STEPS = 30


class ThresholdMethod(str, Enum):
    MONTE_CARLO = "monte_carlo"
    CHI2_APPROX = "chi2_approx"

    def __str__(self):
        return self.value


class DetectionConfig(BaseModel):
    """Change magnitude rho, false alarm budget alpha and the resolved threshold."""

    model_config = ConfigDict(frozen=True, use_enum_values=False)

    rho: float = Field(gt=0)
    alpha: float = Field(gt=0, lt=1)
    threshold_method: ThresholdMethod = ThresholdMethod.CHI2_APPROX
    eta: Optional[float] = Field(default=None, ge=0)

    def resolved(self, eta):
        return self.model_copy(update={"eta": float(eta)})


@dataclass(frozen=True)
class DifferenceStatistic:
    delta_theta: np.ndarray
    norm: float
    sigma_delta: np.ndarray
    eigen: numstat.SymmetricEigen

    @property
    def d(self):
        return self.delta_theta.shape[0]


@dataclass(frozen=True)
class Decision:
    raised: bool
    statistic: float
    threshold_used: float
    method: str


@dataclass(frozen=True)
class GlrResult:
    glr: float
    constrained_pair: tuple
    unconstrained_pair: tuple
    multiplier: float
    kkt_residual: float = 0.0


# -------------------
# Empirical difference test
# -------------------
def difference_statistic(pre, post):
    """
    Build the empirical difference of two fitted models together with the
    plug-in covariance Sigma = I^{-1}/n + I'^{-1}/n'.
    """
    if pre.d != post.d:
        raise DimensionMismatch(pre.d, post.d, what="post-change model")

    sigma = (
        numstat.spd_inverse(pre.fisher_per_sample, error_cls=SingularFisher) / pre.n
        + numstat.spd_inverse(post.fisher_per_sample, error_cls=SingularFisher) / post.n
    )
    sigma = 0.5 * (sigma + sigma.T)
    delta = np.asarray(post.theta_hat - pre.theta_hat, dtype=float)
    return DifferenceStatistic(
        delta_theta=delta,
        norm=float(np.linalg.norm(delta)),
        sigma_delta=sigma,
        eigen=numstat.eigh(sigma),
    )


def edt_decide(stat, config):
    """Raise the alarm when |delta theta| >= eta; ties go to the alternative."""
    if config.eta is None:
        raise UnresolvedThreshold()
    return Decision(
        raised=bool(stat.norm >= config.eta),
        statistic=stat.norm,
        threshold_used=float(config.eta),
        method=f"edt_{config.threshold_method}",
    )


# -------------------
# Generalized likelihood ratio (linear family)
# -------------------
def _quadratic_terms(data, noise):
    X, y = data.features, data.responses
    A = X.T @ X / noise.sigma2
    b = X.T @ y / noise.sigma2
    return A, b


def _stationary_pair(A, b, A_prime, b_prime, lam):
    """Solve (A + 2 lam I) t - 2 lam t' = b, (A' + 2 lam I) t' - 2 lam t = b'."""
    d = A.shape[0]
    eye = np.eye(d)
    M = np.block([[A + 2.0 * lam * eye, -2.0 * lam * eye], [-2.0 * lam * eye, A_prime + 2.0 * lam * eye]])
    z = linalg.solve(M, np.concatenate([b, b_prime]), assume_a="pos")
    return z[:d], z[d:], M


def glr_linear(pre_data, post_data, noise, rho):
    """
    Generalized log-likelihood ratio for two linear regression datasets.

    When the unconstrained MLE pair already satisfies |t - t'| <= rho the
    ratio is zero. Otherwise the constraint is active and the Lagrange
    multiplier solves the secular equation |t(lam) - t'(lam)| = rho, which is
    monotone decreasing in lam; it is bracketed by doubling, located with
    Brent's method and polished by Newton steps.
    """
    for data in (pre_data, post_data):
        if data.family is not Family.LINEAR:
            raise DomainError("The generalized likelihood ratio is only available for the linear family.")
    if pre_data.d != post_data.d:
        raise DimensionMismatch(pre_data.d, post_data.d, what="post-change design")
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}.")

    A, b = _quadratic_terms(pre_data, noise)
    A_prime, b_prime = _quadratic_terms(post_data, noise)
    theta_ml = numstat.spd_solve(A, b, error_cls=SingularDesign)
    theta_ml_prime = numstat.spd_solve(A_prime, b_prime, error_cls=SingularDesign)
    unconstrained = (theta_ml, theta_ml_prime)

    if np.linalg.norm(theta_ml_prime - theta_ml) <= rho:
        return GlrResult(glr=0.0, constrained_pair=unconstrained, unconstrained_pair=unconstrained, multiplier=0.0)

    tol = SECULAR_TOL * max(1.0, rho)

    def secular(lam):
        theta, theta_prime, _ = _stationary_pair(A, b, A_prime, b_prime, lam)
        return float(np.linalg.norm(theta - theta_prime)) - rho

    hi = 1.0
    for _ in range(MAX_DOUBLINGS):
        if secular(hi) <= 0.0:
            break
        hi *= 2.0
    else:
        raise RootBracketFailure(MAX_DOUBLINGS)

    lam = optimize.brentq(secular, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)

    for _ in range(NEWTON_POLISH_STEPS):
        theta, theta_prime, M = _stationary_pair(A, b, A_prime, b_prime, lam)
        diff = theta - theta_prime
        g = float(np.linalg.norm(diff)) - rho
        if abs(g) <= tol:
            break
        rhs = 2.0 * np.concatenate([diff, -diff])
        dz = -linalg.solve(M, rhs, assume_a="pos")
        d = A.shape[0]
        slope = float(diff @ (dz[:d] - dz[d:])) / (g + rho)
        if slope >= 0.0:
            break
        lam = min(max(lam - g / slope, 0.0), hi)
    else:
        raise ConvergenceFailure(f"Secular equation residual {g:.3e} above {tol:.1e}.")

    if abs(g) > tol:
        raise ConvergenceFailure(f"Secular equation residual {g:.3e} above {tol:.1e}.")

    # L is quadratic, so L(t) - L(t_ml) = (t - t_ml)^T A (t - t_ml) / 2 exactly
    e, e_prime = theta - theta_ml, theta_prime - theta_ml_prime
    glr = 0.5 * float(e @ A @ e) + 0.5 * float(e_prime @ A_prime @ e_prime)

    stationarity = np.concatenate(
        [A @ theta - b + 2.0 * lam * diff, A_prime @ theta_prime - b_prime - 2.0 * lam * diff]
    )
    kkt = max(float(np.max(np.abs(stationarity))), abs(g))
    logger.debug(f"GLR solve: lambda={lam:.6g}, glr={glr:.6g}, kkt={kkt:.2e}")

    return GlrResult(
        glr=max(glr, 0.0),
        constrained_pair=(theta, theta_prime),
        unconstrained_pair=unconstrained,
        multiplier=float(lam),
        kkt_residual=kkt,
    )


def glr_decide(result, tau):
    if not tau >= 0:
        raise DomainError(f"GLRT threshold tau must be >= 0, got {tau}.")
    return Decision(raised=bool(result.glr >= tau), statistic=result.glr, threshold_used=float(tau), method="glrt")


# -------------------
# Upper bound on the GLR
# -------------------
def interpolated_null_pair(theta_hat, theta_hat_prime, rho, mu):
    """
    Feasible null pair on the segment joining the two MLEs:
    t0 = t + mu u and t0' = t + (mu + rho) u, with u the unit difference.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    delta = np.asarray(theta_hat_prime, dtype=float) - theta_hat
    norm = float(np.linalg.norm(delta))
    if norm <= rho:
        raise DomainError("The MLE pair is already feasible; no interpolation needed.")
    if not 0.0 <= mu <= norm - rho:
        raise DomainError(f"mu must lie in [0, {norm - rho:.6g}], got {mu}.")
    u = delta / norm
    return theta_hat + mu * u, theta_hat + (mu + rho) * u


def approx_glr_upper_bound(stat, rho, mu, lambda_M, sigma2):
    """
    Quadratic bound [mu^2 + (|delta| - (mu + rho))^2] lambda_M / (2 sigma2)
    on the GLR obtained from the interpolated null pair.
    """
    upper = max(0.0, stat.norm - rho)
    if not -1e-12 <= mu <= upper + 1e-12:
        raise DomainError(f"mu must lie in [0, {upper:.6g}], got {mu}.")
    if not lambda_M > 0:
        raise DomainError(f"lambda_M must be > 0, got {lambda_M}.")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be > 0, got {sigma2}.")
    if stat.norm <= rho:
        return 0.0
    return (mu**2 + (stat.norm - (mu + rho)) ** 2) * lambda_M / (2.0 * sigma2)


def tightest_glr_upper_bound(stat, rho, lambda_M, sigma2):
    """The bound minimized over mu, attained at mu = (|delta| - rho) / 2."""
    mu = 0.5 * max(0.0, stat.norm - rho)
    return approx_glr_upper_bound(stat, rho, mu, lambda_M, sigma2)
