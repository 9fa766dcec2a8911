"""
Numerical statistics kernel.

Symmetric eigendecomposition, SPD solves, seeded random streams and the
central / non-central chi-squared distribution functions used to set
detection thresholds.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special, stats

from .exceptions import (
    ConvergenceFailure,
    DomainError,
    NegativeEigenvalue,
    NonSymmetric,
    SingularMatrix,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-12
MAX_CONDITION = 1e12
POISSON_TAIL_MASS = 1e-12


# -------------------
# Eigendecomposition
# -------------------
@dataclass(frozen=True)
class SymmetricEigen:
    """
    Eigendecomposition A = P^T diag(eigenvalues) P.

    Rows of ``eigenvectors`` are the eigenvectors, ordered by descending
    eigenvalue. The first nonzero entry of each row is positive.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self):
        return self.eigenvalues.shape[0]

    @property
    def lambda_max(self):
        return float(self.eigenvalues[0])

    @property
    def lambda_min(self):
        return float(self.eigenvalues[-1])

    def clamped_eigenvalues(self):
        """Eigenvalues with round-off negatives in [-1e-12, 0] set to zero."""
        lam = self.eigenvalues
        if lam.size and lam.min() < -NEGATIVE_EIG_TOL:
            raise NegativeEigenvalue(float(lam.min()))
        return np.clip(lam, 0.0, None)

    def sqrt_factor(self):
        """Return B = P^T Lambda^{1/2}, so that B B^T reconstructs the matrix."""
        return self.eigenvectors.T * np.sqrt(self.clamped_eigenvalues())


def eigh(matrix, tol=SYMMETRY_TOL):
    """
    Eigendecomposition of a symmetric matrix with descending eigenvalues and
    a deterministic sign convention.

    Raises:
        NonSymmetric: if |A - A^T| exceeds ``tol`` anywhere
        ConvergenceFailure: if LAPACK fails to converge
    """
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DomainError(f"eigh expects a square matrix, got shape {A.shape}.")

    deviation = float(np.max(np.abs(A - A.T)))
    if deviation > tol:
        raise NonSymmetric(deviation, tol)

    try:
        values, vectors = np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"Symmetric eigensolver did not converge: {exc}") from exc

    order = np.argsort(-values, kind="stable")
    values = values[order]
    rows = vectors[:, order].T.copy()

    scale = np.max(np.abs(rows), axis=1, keepdims=True)
    for i, row in enumerate(rows):
        nonzero = np.flatnonzero(np.abs(row) > 1e-12 * max(scale[i, 0], 1e-300))
        if nonzero.size and row[nonzero[0]] < 0:
            rows[i] = -row

    return SymmetricEigen(eigenvalues=values, eigenvectors=rows)


# -------------------
# SPD solves
# -------------------
def condition_number(matrix):
    return float(np.linalg.cond(matrix))


def spd_solve(matrix, rhs, error_cls=SingularMatrix, max_condition=MAX_CONDITION):
    """
    Solve A x = rhs for symmetric positive-definite A via Cholesky.

    Raises ``error_cls`` when A is ill-conditioned or not positive definite.
    """
    A = np.asarray(matrix, dtype=float)
    cond = condition_number(A)
    if not np.isfinite(cond) or cond >= max_condition:
        raise error_cls(cond)
    try:
        factor = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        raise error_cls(cond)
    return linalg.cho_solve(factor, rhs)


def spd_inverse(matrix, error_cls=SingularMatrix, max_condition=MAX_CONDITION):
    A = np.asarray(matrix, dtype=float)
    inverse = spd_solve(A, np.eye(A.shape[0]), error_cls=error_cls, max_condition=max_condition)
    return 0.5 * (inverse + inverse.T)


# -------------------
# Random streams
# -------------------
@dataclass(frozen=True)
class RngStream:
    """
    Reproducible random stream identified by (seed, stream path).

    Streams are derived with numpy's SeedSequence spawn keys and drive a
    counter-based Philox generator, so a trial's draws depend only on its
    coordinates and never on thread scheduling.
    """

    seed: int
    key: tuple = field(default=())

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError(f"Seed must be an unsigned 64-bit integer, got {self.seed}.")
        object.__setattr__(self, "key", tuple(int(k) for k in self.key))

    def substream(self, *keys):
        return RngStream(self.seed, self.key + tuple(int(k) for k in keys))

    def generator(self):
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.key)
        return np.random.Generator(np.random.Philox(sequence))


def sample_gaussian_vector(rng, mean, covariance, size=None):
    """
    Draw from N(mean, Sigma) given Sigma's eigendecomposition.

    Returns mean + P^T Lambda^{1/2} u with u standard normal. With ``size``
    the result has shape (size, d).
    """
    mean = np.asarray(mean, dtype=float)
    factor = covariance.sqrt_factor()
    if mean.shape != (covariance.dim,):
        raise DomainError(f"Mean has shape {mean.shape}, covariance is {covariance.dim}-dimensional.")

    generator = rng.generator() if isinstance(rng, RngStream) else rng
    if size is None:
        u = generator.standard_normal(covariance.dim)
        return mean + factor @ u
    u = generator.standard_normal((size, covariance.dim))
    return mean + u @ factor.T


# -------------------
# Chi-squared distributions
# -------------------
@dataclass(frozen=True)
class NoncentralChiSquared:
    dof: int
    noncentrality: float = 0.0

    def __post_init__(self):
        if int(self.dof) != self.dof or self.dof < 1:
            raise DomainError(f"Degrees of freedom must be a positive integer, got {self.dof}.")
        if not self.noncentrality >= 0:
            raise DomainError(f"Non-centrality must be >= 0, got {self.noncentrality}.")

    @property
    def mean(self):
        return self.dof + self.noncentrality

    @property
    def variance(self):
        return 2.0 * (self.dof + 2.0 * self.noncentrality)


def central_chi2_cdf(k, x):
    """Central chi-squared CDF as the regularized lower incomplete gamma P(k/2, x/2)."""
    x = np.asarray(x, dtype=float)
    result = special.gammainc(0.5 * k, 0.5 * np.clip(x, 0.0, None))
    result = np.where(x > 0, result, 0.0)
    return float(result) if result.ndim == 0 else result


def _poisson_terms(half_gamma):
    """Indices and weights of the Poisson mixture, truncated at 1e-12 tail mass."""
    if half_gamma == 0:
        return np.zeros(1), np.ones(1)
    upper = int(stats.poisson.isf(POISSON_TAIL_MASS, half_gamma)) + 1
    while stats.poisson.sf(upper, half_gamma) >= POISSON_TAIL_MASS:
        upper += 1 + upper // 10
    j = np.arange(upper + 1, dtype=float)
    return j, stats.poisson.pmf(j, half_gamma)


def ncx2_cdf(dist, x):
    """
    CDF of chi2(k, gamma) via the Poisson-weighted series of central CDFs,
    sum_j e^{-gamma/2} (gamma/2)^j / j! * F(k + 2j, x).
    """
    if dist.noncentrality == 0:
        return central_chi2_cdf(dist.dof, x)
    x_arr = np.asarray(x, dtype=float)
    j, weights = _poisson_terms(0.5 * dist.noncentrality)
    half_x = 0.5 * np.clip(x_arr, 0.0, None)[..., None]
    terms = special.gammainc(0.5 * dist.dof + j, half_x)
    result = np.clip(terms @ weights, 0.0, 1.0)
    result = np.where(x_arr > 0, result, 0.0)
    return float(result) if result.ndim == 0 else result


def ncx2_sf(dist, x):
    x_arr = np.asarray(x, dtype=float)
    j, weights = _poisson_terms(0.5 * dist.noncentrality)
    half_x = 0.5 * np.clip(x_arr, 0.0, None)[..., None]
    terms = special.gammaincc(0.5 * dist.dof + j, half_x)
    result = np.clip(terms @ weights, 0.0, 1.0)
    result = np.where(x_arr > 0, result, 1.0)
    return float(result) if result.ndim == 0 else result


def ncx2_quantile(dist, p):
    """
    Inverse CDF of chi2(k, gamma) by bracketed root finding on ncx2_cdf.

    The bracket starts at [0, mean + 40 sd + 40] and is
    widened if the CDF at the upper end is still below ``p``.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"Probability must lie in (0, 1), got {p}.")

    hi = dist.mean + 40.0 * math.sqrt(dist.variance) + 40.0
    while ncx2_cdf(dist, hi) < p:
        hi *= 2.0

    root = optimize.brentq(
        lambda t: ncx2_cdf(dist, t) - p, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500
    )
    return float(root)
