"""
Threshold resolution for the empirical difference test.

Two calibrations are provided: the conservative non-central chi-squared
bound computed from the eigenvalues of the difference covariance, and Monte
Carlo calibration that simulates the whole fit-and-compare pipeline at a
null pair on the boundary |theta - theta'| = rho. The same null trials can
feed the chi-squared bound with simulated moments in place of the asymptotic
covariance. The Monte Carlo engine is shared with the experiment harness.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from opentelemetry import trace

from . import families, numstat
from .conf import get_setting
from .detector import (
    DetectionConfig,
    ThresholdMethod,
    difference_statistic,
    edt_decide,
    glr_decide,
    glr_linear,
)
from .exceptions import (
    DimensionMismatch,
    DomainError,
    ModelFitFailure,
    NumericalError,
    SingularCovariance,
)
from .families import Family, NoiseSpec

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

MIN_TRIALS = 100
MAX_RETRIES = 5


# -------------------
# Gaussian quadratic form
# -------------------
@dataclass(frozen=True)
class QuadFormRepresentation:
    """|G|^2 for G ~ N(shift, Sigma) written as sum_i lambda_i (U_i + b_i)^2."""

    weights: np.ndarray
    offsets: np.ndarray
    total_noncentrality: float
    rotation: np.ndarray

    def sample(self, rng, size):
        generator = rng.generator() if isinstance(rng, numstat.RngStream) else rng
        u = generator.standard_normal((size, self.weights.shape[0]))
        return ((u + self.offsets) ** 2) @ self.weights

    def reconstructed_shift(self):
        return self.rotation.T @ (np.sqrt(self.weights) * self.offsets)


def quadform_representation(sigma_delta_eigen, mean_shift):
    """
    Weights lambda_i and offsets b = Lambda^{-1/2} P (theta' - theta).

    The rotation by P is required for Sigma = P^T Lambda P; without it the
    representation only holds for diagonal Sigma.
    """
    shift = np.asarray(mean_shift, dtype=float).reshape(-1)
    if shift.shape[0] != sigma_delta_eigen.dim:
        raise DimensionMismatch(sigma_delta_eigen.dim, shift.shape[0], what="mean shift")
    weights = sigma_delta_eigen.eigenvalues
    if not np.all(weights > 0):
        raise SingularCovariance(_condition(weights))

    rotated = sigma_delta_eigen.eigenvectors @ shift
    offsets = rotated / np.sqrt(weights)
    if not np.any(shift):
        offsets = np.zeros_like(shift)
    return QuadFormRepresentation(
        weights=weights.copy(),
        offsets=offsets,
        total_noncentrality=float(offsets @ offsets),
        rotation=sigma_delta_eigen.eigenvectors,
    )


def _condition(eigenvalues):
    smallest = float(np.min(eigenvalues))
    return math.inf if smallest <= 0 else float(np.max(eigenvalues)) / smallest


# -------------------
# Reports
# -------------------
@dataclass(frozen=True)
class ThresholdReport:
    eta: float
    method: ThresholdMethod
    alpha: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def std_err(self):
        return self.diagnostics.get("std_err", 0.0)


@dataclass(frozen=True)
class ProbabilityEstimate:
    p: float
    std_err: float
    trials: int

    @classmethod
    def from_hits(cls, hits, trials):
        p = hits / trials
        return cls(p=p, std_err=math.sqrt(p * (1.0 - p) / trials), trials=trials)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}.")


def _check_trials(trials):
    if trials < MIN_TRIALS:
        raise DomainError(f"At least {MIN_TRIALS} Monte Carlo trials are required, got {trials}.")


# -------------------
# Chi-squared bound
# -------------------
def chi2_threshold(sigma_delta_eigen, rho, alpha, d=None):
    """
    Conservative threshold from P{chi2(d, rho^2 / lambda_min) >= eta^2 / lambda_max} = alpha.
    """
    _check_alpha(alpha)
    d = sigma_delta_eigen.dim if d is None else d
    if d != sigma_delta_eigen.dim:
        raise DimensionMismatch(sigma_delta_eigen.dim, d, what="dimension")
    if not rho >= 0:
        raise DomainError(f"rho must be >= 0, got {rho}.")
    lam = sigma_delta_eigen.eigenvalues
    if not np.all(lam > 0):
        raise SingularCovariance(_condition(lam))

    lambda_max, lambda_min = sigma_delta_eigen.lambda_max, sigma_delta_eigen.lambda_min
    noncentrality = rho**2 / lambda_min
    q = numstat.ncx2_quantile(numstat.NoncentralChiSquared(d, noncentrality), 1.0 - alpha)
    eta = math.sqrt(lambda_max * q)
    logger.debug(f"chi2 threshold: d={d}, gamma={noncentrality:.6g}, q={q:.6g}, eta={eta:.6g}")
    return ThresholdReport(
        eta=eta,
        method=ThresholdMethod.CHI2_APPROX,
        alpha=alpha,
        diagnostics={
            "lambda_max": lambda_max,
            "lambda_min": lambda_min,
            "noncentrality": noncentrality,
            "quantile": q,
        },
    )


# -------------------
# Simulation design
# -------------------
@dataclass(frozen=True)
class DesignSpec:
    """
    How simulated datasets are drawn: family, sample sizes, noise, the base
    pre-change parameter, and optional observed feature matrices to resample
    rows from (standard normal features otherwise).
    """

    family: Family
    n: int
    n_prime: int
    base_theta: np.ndarray
    noise: NoiseSpec = families.DEFAULT_NOISE
    feature_pool: Optional[np.ndarray] = None
    feature_pool_prime: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "base_theta", np.asarray(self.base_theta, dtype=float).reshape(-1))
        if self.n < 1 or self.n_prime < 1:
            raise DomainError(f"Sample counts must be >= 1, got n={self.n}, n'={self.n_prime}.")

    @property
    def d(self):
        return self.base_theta.shape[0]

    def nominal_sigma_delta(self, theta=None, theta_prime=None):
        theta = self.base_theta if theta is None else theta
        theta_prime = theta if theta_prime is None else theta_prime
        sigma = families.nominal_mle_covariance(
            self.family, theta, self.n, self.noise, feature_pool=self.feature_pool
        ) + families.nominal_mle_covariance(
            self.family, theta_prime, self.n_prime, self.noise, feature_pool=self.feature_pool_prime
        )
        return 0.5 * (sigma + sigma.T)

    def _on_sphere(self):
        return self.family is Family.LOGISTIC and self.d >= 2 and np.linalg.norm(self.base_theta) > 0

    def boundary_direction(self):
        """
        Leading eigenvector of the nominal difference covariance.

        For the logistic family the eigenvector is taken in the tangent plane
        of the sphere |t| = |base_theta|, where the boundary pair lives.
        """
        sigma = self.nominal_sigma_delta()
        if not self._on_sphere():
            return numstat.eigh(sigma).eigenvectors[0]
        u = self.base_theta / np.linalg.norm(self.base_theta)
        projector = np.eye(self.d) - np.outer(u, u)
        tangent = projector @ sigma @ projector
        v = numstat.eigh(0.5 * (tangent + tangent.T)).eigenvectors[0]
        v = v - (v @ u) * u
        return v / np.linalg.norm(v)

    def boundary_pair(self, rho):
        """
        Null pair at distance exactly rho. Linear: theta + rho v. Logistic:
        theta rotated towards v so that both parameters keep the same norm.
        """
        theta = self.base_theta
        v = self.boundary_direction()
        if not self._on_sphere():
            return theta, theta + rho * v
        radius = float(np.linalg.norm(theta))
        if rho > 2.0 * radius:
            raise DomainError(f"Parameters of norm {radius:.6g} cannot differ by {rho:.6g}.")
        phi = 2.0 * math.asin(rho / (2.0 * radius))
        return theta, math.cos(phi) * theta + math.sin(phi) * radius * v


@dataclass(frozen=True)
class TrialContext:
    pre_data: families.Dataset
    post_data: families.Dataset
    pre_fit: families.FittedModel
    post_fit: families.FittedModel
    noise: NoiseSpec


def edt_statistic(ctx):
    return float(np.linalg.norm(ctx.post_fit.theta_hat - ctx.pre_fit.theta_hat))


def delta_statistic(ctx):
    return np.asarray(ctx.post_fit.theta_hat - ctx.pre_fit.theta_hat, dtype=float)


def glr_statistic(rho):
    def statistic(ctx):
        return glr_linear(ctx.pre_data, ctx.post_data, ctx.noise, rho).glr

    return statistic


def edt_alarm(config):
    """1.0 when edt_decide raises the alarm under ``config``, else 0.0."""

    def statistic(ctx):
        stat = difference_statistic(ctx.pre_fit, ctx.post_fit)
        return float(edt_decide(stat, config).raised)

    return statistic


def glr_alarm(rho, tau):
    def statistic(ctx):
        return float(glr_decide(glr_linear(ctx.pre_data, ctx.post_data, ctx.noise, rho), tau).raised)

    return statistic


def alarm_rate(raised):
    """Fraction of raised trials with its binomial standard error."""
    raised = np.asarray(raised, dtype=float)
    return ProbabilityEstimate.from_hits(int(np.count_nonzero(raised)), raised.shape[0])


def run_trial(design, theta, theta_prime, stream, statistics):
    pre = families.generate_dataset(
        stream.substream(0), design.family, theta, design.n, design.noise, feature_pool=design.feature_pool
    )
    post = families.generate_dataset(
        stream.substream(1),
        design.family,
        theta_prime,
        design.n_prime,
        design.noise,
        feature_pool=design.feature_pool_prime,
    )
    ctx = TrialContext(
        pre_data=pre,
        post_data=post,
        pre_fit=families.fit_mle(pre, design.noise),
        post_fit=families.fit_mle(post, design.noise),
        noise=design.noise,
    )
    return [fn(ctx) for fn in statistics.values()]


def simulate_statistics(
    design, theta, theta_prime, trials, rng, statistics, workers=None, max_retries=MAX_RETRIES, grid_point=None
):
    """
    Run ``trials`` independent replications and evaluate every named
    statistic on each.

    Trial ``t`` draws from ``rng.substream(t)``; a trial whose fit fails is
    retried on ``rng.substream(t, attempt)`` up to ``max_retries`` times.
    Results are collected by trial index, so they do not depend on
    ``workers``.

    Returns:
        dict mapping statistic name to an array whose first axis has length
        ``trials`` (shape (trials, k) for statistics returning k values)
    """
    theta = np.asarray(theta, dtype=float)
    theta_prime = np.asarray(theta_prime, dtype=float)
    workers = workers or get_setting("MODELSHIFT_WORKERS")

    def one(t):
        for attempt in range(max_retries + 1):
            stream = rng.substream(t) if attempt == 0 else rng.substream(t, attempt)
            try:
                return run_trial(design, theta, theta_prime, stream, statistics)
            except NumericalError as exc:
                if attempt == max_retries:
                    raise ModelFitFailure(t, exc, grid_point=grid_point) from exc
                logger.warning(f"Trial {t} failed ({type(exc).__name__}), retrying (attempt {attempt + 1})")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(one, range(trials)))
    else:
        rows = [one(t) for t in range(trials)]

    return {name: np.array([row[j] for row in rows], dtype=float) for j, name in enumerate(statistics)}


def empirical_upper_quantile(values, alpha):
    """Order statistic at index ceil((1 - alpha) N), 1-based, of the sorted sample."""
    ordered = np.sort(np.asarray(values, dtype=float))
    index = math.ceil((1.0 - alpha) * ordered.shape[0] - 1e-9)
    index = min(max(index, 1), ordered.shape[0])
    return float(ordered[index - 1])


# -------------------
# Monte Carlo calibration
# -------------------
SIMULATED_CHI2 = "chi2_simulated"


def moment_chi2_threshold(deltas, rho, alpha):
    """
    Chi-squared bound from the sample moments of simulated differences.

    The sample covariance of ``deltas`` replaces the asymptotic one, and the
    shift bound is raised to the norm of their sample mean when the
    estimator's bias pushes it past rho.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim == 1:
        deltas = deltas[:, None]
    trials = deltas.shape[0]
    _check_trials(trials)
    mean_shift = deltas.mean(axis=0)
    covariance = np.atleast_2d(np.cov(deltas, rowvar=False))
    rho_effective = max(rho, float(np.linalg.norm(mean_shift)))
    report = chi2_threshold(numstat.eigh(0.5 * (covariance + covariance.T)), rho_effective, alpha)
    return ThresholdReport(
        eta=report.eta,
        method=ThresholdMethod.CHI2_APPROX,
        alpha=alpha,
        diagnostics={**report.diagnostics, "trials": trials, "rho_effective": rho_effective, "mean_shift": mean_shift},
    )


def mc_calibrate(design, rho, alpha, trials, rng, statistics, workers=None, boundary=None, moments=False):
    """
    Calibrate several statistics on one shared set of boundary null trials.

    ``boundary`` is the null pair to simulate at, ``design.boundary_pair(rho)``
    by default. With ``moments`` the simulated differences also yield a
    chi-squared bound, reported under SIMULATED_CHI2.

    Returns:
        dict mapping statistic name to ThresholdReport
    """
    _check_alpha(alpha)
    _check_trials(trials)
    theta, theta_prime = design.boundary_pair(rho) if boundary is None else boundary
    theta = np.asarray(theta, dtype=float)
    theta_prime = np.asarray(theta_prime, dtype=float)
    statistics = dict(statistics)
    if moments:
        statistics[SIMULATED_CHI2] = delta_statistic

    with tracer.start_as_current_span("mc_calibrate") as span:
        span.set_attribute("family", str(design.family))
        span.set_attribute("trials", trials)
        span.set_attribute("alpha", alpha)
        span.set_attribute("rho", rho)
        logger.info(f"Monte Carlo calibration: family={design.family}, trials={trials}, alpha={alpha}, rho={rho}")
        samples = simulate_statistics(design, theta, theta_prime, trials, rng, statistics, workers=workers)

    std_err = math.sqrt(alpha * (1.0 - alpha) / trials)
    gap = float(np.linalg.norm(theta_prime - theta))
    reports = {}
    for name, values in samples.items():
        if moments and name == SIMULATED_CHI2:
            reports[name] = moment_chi2_threshold(values, rho, alpha)
            logger.info(f"Simulated chi2 bound: threshold={reports[name].eta:.6g}")
            continue
        eta = empirical_upper_quantile(values, alpha)
        reports[name] = ThresholdReport(
            eta=eta,
            method=ThresholdMethod.MONTE_CARLO,
            alpha=alpha,
            diagnostics={
                "trials": trials,
                "std_err": std_err,
                "positive_fraction": float(np.mean(values > 0)),
                "boundary_direction": (theta_prime - theta) / gap if gap > 0 else np.zeros_like(theta),
            },
        )
        logger.info(f"Calibrated {name}: threshold={eta:.6g}")
    return reports


def mc_threshold(family, design, rho, alpha, trials, rng, workers=None):
    """
    Monte Carlo threshold for the empirical difference test: the empirical
    (1 - alpha) quantile of |delta theta hat| at the boundary null pair
    ``design.boundary_pair(rho)``.
    """
    if Family(family) is not design.family:
        raise DomainError(f"Design is for the {design.family} family, not {family}.")
    return mc_calibrate(design, rho, alpha, trials, rng, {"edt": edt_statistic}, workers=workers)["edt"]


def simulated_chi2_threshold(design, rho, alpha, trials, rng, workers=None, boundary=None):
    """Chi-squared bound fed with the simulated moments of delta theta hat at the boundary pair."""
    return mc_calibrate(design, rho, alpha, trials, rng, {}, workers=workers, boundary=boundary, moments=True)[
        SIMULATED_CHI2
    ]


def empirical_false_alarm(family, design, theta, theta_prime, eta, trials, rng, workers=None):
    """
    Fraction of simulated trials on which edt_decide raises the alarm at
    ``eta``. Under the null this estimates the false alarm probability,
    under the alternative the detection probability.
    """
    _check_trials(trials)
    if Family(family) is not design.family:
        raise DomainError(f"Design is for the {design.family} family, not {family}.")

    with tracer.start_as_current_span("empirical_false_alarm") as span:
        span.set_attribute("family", str(design.family))
        span.set_attribute("trials", trials)
        values = simulate_statistics(
            design, theta, theta_prime, trials, rng, {"alarm": edt_alarm(_fixed_threshold(eta))}, workers=workers
        )
    return alarm_rate(values["alarm"])


def _fixed_threshold(eta, rho=1.0, alpha=0.5):
    # rho and alpha do not enter the decision once eta is fixed
    return DetectionConfig(rho=rho, alpha=alpha, threshold_method=ThresholdMethod.MONTE_CARLO, eta=eta)
