"""
Model families for change detection.

Each family (linear regression with known Gaussian noise, logistic
regression with +/-1 labels) provides its negative log-likelihood, analytic
gradient and Hessian, maximum likelihood fitting, per-sample Fisher
information and a synthetic data generator.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from . import numstat
from .exceptions import (
    DatasetFormatError,
    DimensionMismatch,
    DomainError,
    NoConvergence,
    Separation,
    SingularDesign,
    SingularFisher,
)

logger = logging.getLogger(__name__)

NEWTON_GRAD_TOL = 1e-8
NEWTON_MAX_ITER = 100
NEWTON_MAX_HALVINGS = 60
SEPARATION_NORM = 1e6
HERMITE_NODES = 80


class Family(str, Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class NoiseSpec:
    """Known Gaussian noise variance of the linear family."""

    sigma2: float = 1.0

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise DomainError(f"Noise variance sigma2 must be > 0, got {self.sigma2}.")


DEFAULT_NOISE = NoiseSpec()


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


# -------------------
# Dataset
# -------------------
@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    responses: np.ndarray
    family: Family

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.responses, dtype=float).reshape(-1)
        family = Family(self.family)
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise DomainError(f"Dataset needs n >= 1 and d >= 1, got shape {X.shape}.")
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatch(X.shape[0], y.shape[0], what="response vector")
        if family is Family.LOGISTIC and not np.all(np.isin(y, (-1.0, 1.0))):
            raise DomainError("Logistic responses must be -1 or +1.")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "responses", _frozen(y))
        object.__setattr__(self, "family", family)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @classmethod
    def from_csv(cls, path, family):
        """
        Read a dataset from CSV.

        Expected CSV columns: y, x1, ..., xd
        """
        family = Family(family)
        responses, rows = [], []
        try:
            with open(path, newline="", encoding="utf-8") as csvfile:
                reader = csv.reader(csvfile)
                header = next(reader, None)
                if header is None:
                    raise DatasetFormatError(path, 1, "file is empty")
                header = [h.strip() for h in header]
                d = len(header) - 1
                expected = ["y"] + [f"x{j}" for j in range(1, d + 1)]
                if d < 1 or header != expected:
                    raise DatasetFormatError(
                        path, 1, f"header must be {','.join(expected[:2])},...,xd; got {','.join(header)}"
                    )
                for row in reader:
                    if not row or all(not cell.strip() for cell in row):
                        continue
                    if len(row) != d + 1:
                        raise DatasetFormatError(
                            path, reader.line_num, f"expected {d + 1} fields, got {len(row)}"
                        )
                    try:
                        values = [float(cell) for cell in row]
                    except ValueError:
                        raise DatasetFormatError(path, reader.line_num, f"non-numeric field in {row}")
                    if not all(math.isfinite(v) for v in values):
                        raise DatasetFormatError(path, reader.line_num, "non-finite value")
                    if family is Family.LOGISTIC and values[0] not in (-1.0, 1.0):
                        raise DatasetFormatError(
                            path, reader.line_num, f"logistic label must be -1 or +1, got {row[0]}"
                        )
                    responses.append(values[0])
                    rows.append(values[1:])
        except FileNotFoundError:
            raise DatasetFormatError(path, None, "file not found")
        except UnicodeDecodeError as exc:
            raise DatasetFormatError(path, None, f"not a text file ({exc.reason})")

        if not rows:
            raise DatasetFormatError(path, None, "no data rows")
        logger.debug(f"Read {len(rows)} samples of dimension {d} from {path}")
        return cls(features=np.array(rows), responses=np.array(responses), family=family)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as csvfile:
            writer = csv.writer(csvfile)
            writer.writerow(["y"] + [f"x{j}" for j in range(1, self.d + 1)])
            for y, x in zip(self.responses, self.features):
                writer.writerow([repr(float(y))] + [repr(float(v)) for v in x])


@dataclass(frozen=True)
class FittedModel:
    theta_hat: np.ndarray
    fisher_per_sample: np.ndarray
    n: int
    neg_log_lik: float
    family: Family
    iterations: int = 0

    @property
    def d(self):
        return self.theta_hat.shape[0]


# -------------------
# Family implementations
# -------------------
class LinearRegression:
    """y = X theta + xi with xi ~ N(0, sigma2 I), sigma2 known."""

    family = Family.LINEAR

    def neg_log_likelihood(self, X, y, theta, noise):
        residual = y - X @ theta
        n = X.shape[0]
        return float(residual @ residual / (2.0 * noise.sigma2) + 0.5 * n * math.log(2.0 * math.pi * noise.sigma2))

    def gradient(self, X, y, theta, noise):
        return -(X.T @ (y - X @ theta)) / noise.sigma2

    def hessian(self, X, y, theta, noise):
        return X.T @ X / noise.sigma2

    def fit(self, X, y, noise):
        theta = numstat.spd_solve(X.T @ X, X.T @ y, error_cls=SingularDesign)
        return theta, 0

    def fisher_per_sample(self, X, theta, noise):
        return X.T @ X / (X.shape[0] * noise.sigma2)

    def sample_responses(self, generator, X, theta, noise):
        return X @ theta + math.sqrt(noise.sigma2) * generator.standard_normal(X.shape[0])

    def nominal_fisher(self, theta, noise, feature_pool=None):
        if feature_pool is None:
            return np.eye(theta.shape[0]) / noise.sigma2
        return self.fisher_per_sample(feature_pool, theta, noise)


class LogisticRegression:
    """p(y | x, theta) = 1 / (1 + exp(-y x^T theta)), y in {-1, +1}."""

    family = Family.LOGISTIC

    def neg_log_likelihood(self, X, y, theta, noise=None):
        return float(np.sum(np.logaddexp(0.0, -y * (X @ theta))))

    def gradient(self, X, y, theta, noise=None):
        return -(X.T @ (y * special.expit(-y * (X @ theta))))

    def hessian(self, X, y, theta, noise=None):
        weights = self._weights(X @ theta)
        return X.T @ (weights[:, None] * X)

    @staticmethod
    def _weights(logits):
        p = special.expit(logits)
        return p * (1.0 - p)

    def fit(self, X, y, noise=None):
        """
        Newton's method with step halving, started at zero.

        Stops when the gradient inf-norm drops to 1e-8. Divergence of the
        iterate norm or a stalled line search is reported as separation.
        """
        theta = np.zeros(X.shape[1])
        value = self.neg_log_likelihood(X, y, theta)
        grad = self.gradient(X, y, theta)
        slack = 16.0 * np.finfo(float).eps

        for iteration in range(NEWTON_MAX_ITER + 1):
            grad_norm = float(np.max(np.abs(grad)))
            if grad_norm <= NEWTON_GRAD_TOL:
                # a finite MLE never classifies every sample with positive margin
                if np.min(y * (X @ theta)) > 0:
                    raise Separation("every sample lies strictly on its label's side of the fitted hyperplane")
                return theta, iteration
            if iteration == NEWTON_MAX_ITER:
                break

            try:
                step = numstat.spd_solve(self.hessian(X, y, theta), grad, error_cls=SingularFisher)
            except SingularFisher as exc:
                raise Separation(f"Hessian became singular (condition {exc.condition:.1e})")
            decrease = float(grad @ step)

            t = 1.0
            for _ in range(NEWTON_MAX_HALVINGS):
                candidate = theta - t * step
                candidate_value = self.neg_log_likelihood(X, y, candidate)
                if candidate_value <= value - 1e-4 * t * decrease + slack * max(1.0, abs(value)):
                    break
                t *= 0.5
            else:
                raise Separation(f"line search stalled with gradient inf-norm {grad_norm:.3e}")

            theta, value = candidate, candidate_value
            if np.linalg.norm(theta) > SEPARATION_NORM:
                raise Separation(f"parameter norm exceeded {SEPARATION_NORM:.0e}")
            grad = self.gradient(X, y, theta)

        raise NoConvergence(NEWTON_MAX_ITER, float(np.max(np.abs(grad))))

    def fisher_per_sample(self, X, theta, noise=None):
        weights = self._weights(X @ theta)
        return X.T @ (weights[:, None] * X) / X.shape[0]

    def sample_responses(self, generator, X, theta, noise=None):
        p = special.expit(X @ theta)
        return np.where(generator.random(X.shape[0]) < p, 1.0, -1.0)

    def nominal_fisher(self, theta, noise=None, feature_pool=None):
        """
        E_x[w(x^T theta) x x^T] for standard normal x, where w = s (1 - s).

        By rotational symmetry this is a (I - u u^T) + b u u^T with u the unit
        vector along theta, a = E[w(r z)], b = E[w(r z) z^2], z ~ N(0, 1) and
        r = |theta|; both are computed by Gauss-Hermite quadrature.
        """
        if feature_pool is not None:
            return self.fisher_per_sample(feature_pool, theta)

        d = theta.shape[0]
        r = float(np.linalg.norm(theta))
        nodes, weights = np.polynomial.hermite_e.hermegauss(HERMITE_NODES)
        weights = weights / math.sqrt(2.0 * math.pi)
        w = self._weights(r * nodes)
        a = float(weights @ w)
        b = float(weights @ (w * nodes**2))
        if r == 0.0:
            return a * np.eye(d)
        u = theta / r
        return a * np.eye(d) + (b - a) * np.outer(u, u)


FAMILIES = {
    Family.LINEAR: LinearRegression(),
    Family.LOGISTIC: LogisticRegression(),
}


def get_family(family):
    return FAMILIES[Family(family)]


def _check_theta(data, theta):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != data.d:
        raise DimensionMismatch(data.d, theta.shape[0])
    return theta


# -------------------
# Public operations
# -------------------
def neg_log_likelihood(data, theta, noise=DEFAULT_NOISE):
    theta = _check_theta(data, theta)
    return get_family(data.family).neg_log_likelihood(data.features, data.responses, theta, noise)


def gradient(data, theta, noise=DEFAULT_NOISE):
    theta = _check_theta(data, theta)
    return get_family(data.family).gradient(data.features, data.responses, theta, noise)


def hessian(data, theta, noise=DEFAULT_NOISE):
    theta = _check_theta(data, theta)
    return get_family(data.family).hessian(data.features, data.responses, theta, noise)


def fisher_per_sample(data, theta, noise=DEFAULT_NOISE):
    theta = _check_theta(data, theta)
    fisher = get_family(data.family).fisher_per_sample(data.features, theta, noise)
    return 0.5 * (fisher + fisher.T)


def fit_mle(data, noise=DEFAULT_NOISE):
    """
    Maximum likelihood fit.

    Linear: normal equations via Cholesky. Logistic: Newton with step halving.

    Raises:
        SingularDesign: X^T X condition number >= 1e12 (linear)
        Separation: diverging or stalled logistic fit
        NoConvergence: Newton iteration budget exhausted
    """
    impl = get_family(data.family)
    theta, iterations = impl.fit(data.features, data.responses, noise)
    logger.debug(f"Fitted {data.family} model: n={data.n}, d={data.d}, iterations={iterations}")
    return FittedModel(
        theta_hat=_frozen(theta),
        fisher_per_sample=_frozen(fisher_per_sample(data, theta, noise)),
        n=data.n,
        neg_log_lik=impl.neg_log_likelihood(data.features, data.responses, theta, noise),
        family=data.family,
        iterations=iterations,
    )


def generate_dataset(rng, family, theta, n, noise=DEFAULT_NOISE, feature_pool=None):
    """
    Draw a synthetic dataset.

    Features are i.i.d. standard normal, or rows resampled with replacement
    from ``feature_pool`` when one is given. Responses follow the family's
    model at ``theta``.
    """
    if n < 1:
        raise DomainError(f"Sample count must be >= 1, got {n}.")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    generator = rng.generator() if isinstance(rng, numstat.RngStream) else rng

    if feature_pool is None:
        X = generator.standard_normal((n, theta.shape[0]))
    else:
        pool = np.asarray(feature_pool, dtype=float)
        if pool.shape[1] != theta.shape[0]:
            raise DimensionMismatch(theta.shape[0], pool.shape[1], what="feature pool")
        X = pool[generator.integers(0, pool.shape[0], size=n)]

    y = get_family(family).sample_responses(generator, X, theta, noise)
    return Dataset(features=X, responses=y, family=family)


def nominal_fisher_per_sample(family, theta, noise=DEFAULT_NOISE, feature_pool=None):
    """Design-based per-sample Fisher information at ``theta``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return get_family(family).nominal_fisher(theta, noise, feature_pool=feature_pool)


def nominal_mle_covariance(family, theta, n, noise=DEFAULT_NOISE, feature_pool=None):
    """
    Design-based covariance of the MLE from ``n`` samples.

    For the linear family with standard normal features this is the exact
    sigma2 E[(X^T X)^{-1}] = sigma2 / (n - d - 1) I when n > d + 1. Otherwise
    the asymptotic I^{-1} / n.
    """
    family = Family(family)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    d = theta.shape[0]
    if family is Family.LINEAR and feature_pool is None and n > d + 1:
        return noise.sigma2 / (n - d - 1) * np.eye(d)
    fisher = nominal_fisher_per_sample(family, theta, noise, feature_pool=feature_pool)
    return numstat.spd_inverse(fisher, error_cls=SingularFisher) / n
