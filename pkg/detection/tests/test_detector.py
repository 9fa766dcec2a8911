import math

import numpy as np
from django.test import SimpleTestCase
from pydantic import ValidationError
from scipy import optimize

from detection import families
from detection.detector import (
    DetectionConfig,
    GlrResult,
    ThresholdMethod,
    approx_glr_upper_bound,
    difference_statistic,
    edt_decide,
    glr_decide,
    glr_linear,
    interpolated_null_pair,
    tightest_glr_upper_bound,
)
from detection.exceptions import DimensionMismatch, DomainError, UnresolvedThreshold
from detection.families import Dataset, Family, FittedModel, NoiseSpec
from detection.numstat import RngStream


def fitted(theta, fisher=None, n=10):
    theta = np.asarray(theta, dtype=float)
    fisher = np.eye(theta.shape[0]) if fisher is None else np.asarray(fisher, dtype=float)
    return FittedModel(theta_hat=theta, fisher_per_sample=fisher, n=n, neg_log_lik=0.0, family=Family.LINEAR)


def random_instance(seed, d, n=None, n_prime=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(d + 3, 30))
    n_prime = n_prime or int(rng.integers(d + 3, 30))
    theta = rng.standard_normal(d)
    theta_prime = theta + rng.uniform(0.0, 3.0) * rng.standard_normal(d)
    pre = families.generate_dataset(RngStream(seed, (0,)), Family.LINEAR, theta, n)
    post = families.generate_dataset(RngStream(seed, (1,)), Family.LINEAR, theta_prime, n_prime)
    return pre, post


def oracle_glr_2d(pre, post, rho, sigma2=1.0):
    """Minimum of the objective gap over |t - t'| = rho, searched over the direction angle."""
    A = pre.features.T @ pre.features / sigma2
    A_prime = post.features.T @ post.features / sigma2
    t_ml = np.linalg.solve(A, pre.features.T @ pre.responses / sigma2)
    t_ml_prime = np.linalg.solve(A_prime, post.features.T @ post.responses / sigma2)

    def gap(phi):
        u = np.array([math.cos(phi), math.sin(phi)])
        # t' = t + rho u; the best t for a fixed direction solves a linear system
        t = np.linalg.solve(A + A_prime, A @ t_ml + A_prime @ (t_ml_prime - rho * u))
        e, e_prime = t - t_ml, t + rho * u - t_ml_prime
        return 0.5 * e @ A @ e + 0.5 * e_prime @ A_prime @ e_prime

    angles = np.linspace(0.0, 2.0 * math.pi, 3601)
    values = np.array([gap(phi) for phi in angles])
    best = angles[np.argmin(values)]
    step = angles[1] - angles[0]
    for _ in range(2):
        refined = optimize.minimize_scalar(
            gap, bounds=(best - step, best + step), method="bounded", options={"xatol": 1e-12}
        )
        best, step = refined.x, step / 10.0
    return float(gap(best))


def oracle_glr(pre, post, rho, sigma2=1.0, directions=4000):
    """
    Minimum of the objective gap over |t - t'| = rho in any dimension: a
    random search over unit directions u followed by Nelder-Mead polishing.
    For fixed u the best t solves (A + A') t = A t_ml + A' (t_ml' - rho u).
    """
    A = pre.features.T @ pre.features / sigma2
    A_prime = post.features.T @ post.features / sigma2
    t_ml = np.linalg.solve(A, pre.features.T @ pre.responses / sigma2)
    t_ml_prime = np.linalg.solve(A_prime, post.features.T @ post.responses / sigma2)
    S = A + A_prime
    base = np.linalg.solve(S, A @ t_ml + A_prime @ t_ml_prime)
    pull = np.linalg.solve(S, A_prime)

    def gaps(U):
        T = base[:, None] - rho * pull @ U
        E = T - t_ml[:, None]
        E_prime = T + rho * U - t_ml_prime[:, None]
        return 0.5 * np.sum(E * (A @ E), axis=0) + 0.5 * np.sum(E_prime * (A_prime @ E_prime), axis=0)

    d = A.shape[0]
    if d == 1:
        return float(gaps(np.array([[1.0, -1.0]])).min())

    U = np.random.default_rng(d).standard_normal((d, directions))
    U /= np.linalg.norm(U, axis=0)
    values = gaps(U)

    def gap(w):
        return float(gaps((w / np.linalg.norm(w))[:, None])[0])

    best = np.inf
    for start in np.argsort(values)[:5]:
        w = U[:, start]
        for _ in range(2):
            w = optimize.minimize(gap, w, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000}).x
        best = min(best, gap(w))
    return best


class DetectionConfigTest(SimpleTestCase):
    def test_bounds(self):
        with self.assertRaises(ValidationError):
            DetectionConfig(rho=0.0, alpha=0.1)
        with self.assertRaises(ValidationError):
            DetectionConfig(rho=1.0, alpha=1.0)

    def test_resolved(self):
        config = DetectionConfig(rho=1.0, alpha=0.1, threshold_method=ThresholdMethod.MONTE_CARLO)
        self.assertIsNone(config.eta)
        self.assertEqual(config.resolved(0.75).eta, 0.75)


class DifferenceStatisticTest(SimpleTestCase):
    def test_identical_models(self):
        stat = difference_statistic(fitted([1.0, 2.0]), fitted([1.0, 2.0]))
        self.assertEqual(stat.norm, 0.0)

    def test_pythagorean(self):
        stat = difference_statistic(fitted(np.zeros(4)), fitted([3.0, 4.0, 0.0, 0.0]))
        self.assertAlmostEqual(stat.norm, 5.0, places=12)
        np.testing.assert_allclose(stat.delta_theta, [3.0, 4.0, 0.0, 0.0])

    def test_linear_sigma_is_ols_covariance(self):
        sigma2 = 2.5
        pre = families.generate_dataset(RngStream(1), Family.LINEAR, np.array([1.0, 0.0, -1.0]), 25, NoiseSpec(sigma2))
        post = families.generate_dataset(RngStream(2), Family.LINEAR, np.array([0.5, 0.5, 0.0]), 35, NoiseSpec(sigma2))
        stat = difference_statistic(
            families.fit_mle(pre, NoiseSpec(sigma2)), families.fit_mle(post, NoiseSpec(sigma2))
        )
        expected = sigma2 * np.linalg.inv(pre.features.T @ pre.features) + sigma2 * np.linalg.inv(
            post.features.T @ post.features
        )
        np.testing.assert_allclose(stat.sigma_delta, expected, rtol=1e-10)
        self.assertTrue(np.all(stat.eigen.eigenvalues > 0))

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            difference_statistic(fitted([1.0]), fitted([1.0, 2.0]))


class EdtDecideTest(SimpleTestCase):
    def decide(self, norm, eta):
        stat = difference_statistic(fitted([0.0]), fitted([norm]))
        return edt_decide(stat, DetectionConfig(rho=1.0, alpha=0.1).resolved(eta))

    def test_below_threshold(self):
        self.assertFalse(self.decide(0.0, 0.5).raised)

    def test_tie_raises(self):
        decision = self.decide(0.5, 0.5)
        self.assertTrue(decision.raised)
        self.assertEqual(decision.threshold_used, 0.5)
        self.assertEqual(decision.method, "edt_chi2_approx")

    def test_random_pairs(self):
        rng = np.random.default_rng(0)
        for norm, eta in rng.uniform(0.0, 2.0, size=(50, 2)):
            self.assertEqual(self.decide(norm, eta).raised, norm >= eta)

    def test_unresolved(self):
        stat = difference_statistic(fitted([0.0]), fitted([1.0]))
        with self.assertRaises(UnresolvedThreshold):
            edt_decide(stat, DetectionConfig(rho=1.0, alpha=0.1))


class GlrLinearTest(SimpleTestCase):
    def test_inactive_constraint(self):
        X = np.eye(2)
        pre = Dataset(features=X, responses=[1.0, 1.0], family=Family.LINEAR)
        post = Dataset(features=X, responses=[1.2, 0.9], family=Family.LINEAR)
        result = glr_linear(pre, post, NoiseSpec(), rho=1.0)
        self.assertEqual(result.glr, 0.0)
        self.assertEqual(result.multiplier, 0.0)
        np.testing.assert_allclose(result.constrained_pair[1], [1.2, 0.9])

    def test_one_dimensional_closed_form(self):
        rng = np.random.default_rng(21)
        for n, n_prime in ((5, 5), (7, 12), (40, 3)):
            y = rng.standard_normal(n)
            y_prime = rng.standard_normal(n_prime) + 4.0
            pre = Dataset(features=np.ones((n, 1)), responses=y, family=Family.LINEAR)
            post = Dataset(features=np.ones((n_prime, 1)), responses=y_prime, family=Family.LINEAR)
            rho = 1.5
            m = y.mean() - y_prime.mean()
            expected = n * n_prime / (n + n_prime) * (abs(m) - rho) ** 2 / 2.0
            result = glr_linear(pre, post, NoiseSpec(), rho)
            self.assertAlmostEqual(result.glr, expected, delta=1e-9 * max(1.0, expected))

    def test_matches_brute_force_oracle(self):
        for seed in range(10):
            pre, post = random_instance(seed, 2)
            rho = 0.5
            result = glr_linear(pre, post, NoiseSpec(), rho)
            if result.multiplier == 0.0:
                continue
            self.assertAlmostEqual(result.glr, oracle_glr_2d(pre, post, rho), delta=1e-4)

    def test_random_instances(self):
        for seed in range(100):
            d = 1 + seed % 5
            pre, post = random_instance(1000 + seed, d)
            rho = 0.25 + (seed % 7) * 0.25
            result = glr_linear(pre, post, NoiseSpec(), rho)
            theta, theta_prime = result.constrained_pair
            self.assertGreaterEqual(result.glr, 0.0)
            self.assertLessEqual(np.linalg.norm(theta - theta_prime), rho + 1e-8)
            if result.multiplier > 0:
                self.assertLessEqual(abs(np.linalg.norm(theta - theta_prime) - rho), 1e-8)
                self.assertLessEqual(result.kkt_residual, 1e-8)
                self.assertAlmostEqual(result.glr, oracle_glr(pre, post, rho), delta=1e-4)
                objective_gap = (
                    families.neg_log_likelihood(pre, theta)
                    + families.neg_log_likelihood(post, theta_prime)
                    - families.neg_log_likelihood(pre, result.unconstrained_pair[0])
                    - families.neg_log_likelihood(post, result.unconstrained_pair[1])
                )
                self.assertAlmostEqual(result.glr, objective_gap, delta=1e-7 * max(1.0, result.glr))

    def test_matches_oracle_up_to_five_dimensions(self):
        for d in range(1, 6):
            for seed in range(4):
                pre, post = random_instance(700 + 10 * d + seed, d)
                gap = np.linalg.norm(families.fit_mle(post).theta_hat - families.fit_mle(pre).theta_hat)
                rho = 0.5 * gap
                result = glr_linear(pre, post, NoiseSpec(), rho)
                self.assertGreater(result.multiplier, 0.0)
                self.assertAlmostEqual(result.glr, oracle_glr(pre, post, rho), delta=1e-4)

    def test_monotone_in_rho(self):
        for seed in range(10):
            pre, post = random_instance(300 + seed, 1 + seed % 5)
            values = [glr_linear(pre, post, NoiseSpec(), rho).glr for rho in np.linspace(0.05, 4.0, 25)]
            for a, b in zip(values, values[1:]):
                self.assertLessEqual(b, a + 1e-9 * max(1.0, a))

    def test_rejects_logistic(self):
        data = Dataset(features=np.eye(2), responses=[1.0, -1.0], family=Family.LOGISTIC)
        with self.assertRaises(DomainError):
            glr_linear(data, data, NoiseSpec(), 1.0)


class GlrDecideTest(SimpleTestCase):
    def result(self, glr):
        pair = (np.zeros(1), np.zeros(1))
        return GlrResult(glr=glr, constrained_pair=pair, unconstrained_pair=pair, multiplier=0.0)

    def test_zero_glr(self):
        self.assertFalse(glr_decide(self.result(0.0), 0.1).raised)

    def test_tie_raises(self):
        self.assertTrue(glr_decide(self.result(0.3), 0.3).raised)

    def test_random_pairs(self):
        rng = np.random.default_rng(4)
        for glr, tau in rng.uniform(0.0, 1.0, size=(50, 2)):
            self.assertEqual(glr_decide(self.result(glr), tau).raised, glr >= tau)


class UpperBoundTest(SimpleTestCase):
    def stat(self, norm):
        return difference_statistic(fitted([0.0]), fitted([norm]))

    def test_feasible_pair(self):
        self.assertEqual(approx_glr_upper_bound(self.stat(0.5), 1.0, 0.0, 2.0, 1.0), 0.0)

    def test_substitution(self):
        self.assertAlmostEqual(approx_glr_upper_bound(self.stat(2.0), 1.0, 0.0, 2.0, 1.0), 1.0)

    def test_tightest_over_mu(self):
        stat, rho, lambda_M, sigma2 = self.stat(3.0), 1.0, 1.7, 0.8
        grid = np.linspace(0.0, 2.0, 2001)
        values = [approx_glr_upper_bound(stat, rho, mu, lambda_M, sigma2) for mu in grid]
        tightest = tightest_glr_upper_bound(stat, rho, lambda_M, sigma2)
        self.assertAlmostEqual(tightest, (3.0 - rho) ** 2 * lambda_M / (4 * sigma2), places=12)
        self.assertAlmostEqual(tightest, min(values), places=9)

    def test_mu_domain(self):
        with self.assertRaises(DomainError):
            approx_glr_upper_bound(self.stat(2.0), 1.0, 1.5, 2.0, 1.0)

    def test_dominates_glr(self):
        for seed in range(20):
            pre, post = random_instance(500 + seed, 3)
            rho = 0.5
            result = glr_linear(pre, post, NoiseSpec(), rho)
            stat = difference_statistic(families.fit_mle(pre), families.fit_mle(post))
            lambda_M = max(
                np.linalg.eigvalsh(pre.features.T @ pre.features).max(),
                np.linalg.eigvalsh(post.features.T @ post.features).max(),
            )
            for mu in np.linspace(0.0, max(0.0, stat.norm - rho), 7):
                bound = approx_glr_upper_bound(stat, rho, mu, lambda_M, 1.0)
                self.assertGreaterEqual(bound, result.glr - 1e-9)


class InterpolatedNullPairTest(SimpleTestCase):
    def test_pair_is_feasible(self):
        t0, t0_prime = interpolated_null_pair(np.zeros(2), np.array([3.0, 4.0]), 1.0, 1.5)
        np.testing.assert_allclose(t0, [0.9, 1.2])
        self.assertAlmostEqual(np.linalg.norm(t0_prime - t0), 1.0, places=12)

    def test_mu_range(self):
        with self.assertRaises(DomainError):
            interpolated_null_pair(np.zeros(2), np.array([3.0, 4.0]), 1.0, 4.5)
