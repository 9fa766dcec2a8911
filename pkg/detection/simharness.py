"""
Experiment engine: sweeps the normalized model change |theta - theta'| / rho
over a grid and estimates the probability that each test raises the alarm.
Grid points below 1 estimate false alarm probabilities, points above 1
detection probabilities.
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import numstat
from .detector import DetectionConfig, ThresholdMethod, difference_statistic, edt_decide
from .exceptions import DomainError
from .families import Family, NoiseSpec
from .threshold import (
    SIMULATED_CHI2,
    DesignSpec,
    alarm_rate,
    chi2_threshold,
    edt_alarm,
    edt_statistic,
    glr_alarm,
    glr_statistic,
    mc_calibrate,
    simulate_statistics,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

LOGISTIC_RHO = 2.0 * math.sin(math.pi / 8.0)
DEFAULT_GRID = [round(0.1 * i, 10) for i in range(21)]
CURVE_HEADER = ["normalized_change", "test", "p_raise", "std_err", "threshold"]

# substream layout under the experiment seed
PARAMETER_STREAM = 0
CALIBRATION_STREAM = 1
SWEEP_STREAM = 2


class DetectionTest(str, Enum):
    EDT_MC = "edt_mc"
    EDT_CHI2 = "edt_chi2"
    GLRT = "glrt"

    def __str__(self):
        return self.value


class CovarianceMode(str, Enum):
    NOMINAL = "nominal"
    PLUGIN = "plugin"
    SIMULATED = "simulated"

    def __str__(self):
        return self.value


# chi-squared covariance per family when a run does not choose one
DEFAULT_COVARIANCE = {Family.LINEAR: CovarianceMode.NOMINAL, Family.LOGISTIC: CovarianceMode.SIMULATED}


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Family = Family.LINEAR
    d: int = Field(default=10, ge=1)
    n: int = Field(default=40, ge=1)
    n_prime: int = Field(default=40, ge=1)
    sigma2: float = Field(default=1.0, gt=0)
    rho: Optional[float] = Field(default=None, gt=0)
    alpha: float = Field(default=0.1, gt=0, lt=1)
    grid: List[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    trials_per_point: int = Field(default=2000, ge=100)
    calibration_trials: int = Field(default=10000, ge=100)
    tests: List[DetectionTest] = Field(default_factory=lambda: [DetectionTest.EDT_MC])
    covariance: CovarianceMode = CovarianceMode.NOMINAL
    seed: int = Field(default=0, ge=0, lt=2**64)
    workers: Optional[int] = Field(default=None, ge=1)

    @field_validator("grid")
    @classmethod
    def check_grid(cls, grid):
        if not grid:
            raise ValueError("grid must not be empty")
        if any(not (g >= 0 and math.isfinite(g)) for g in grid):
            raise ValueError("grid values must be finite and >= 0")
        return grid

    @field_validator("tests")
    @classmethod
    def check_tests(cls, tests):
        if not tests:
            raise ValueError("at least one test is required")
        if len(set(tests)) != len(tests):
            raise ValueError("tests must not repeat")
        return tests

    @model_validator(mode="before")
    @classmethod
    def family_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        family = Family(data.get("family", Family.LINEAR))
        if data.get("rho") is None:
            data = {**data, "rho": 1.0 if family is Family.LINEAR else LOGISTIC_RHO}
        if data.get("covariance") is None:
            data = {**data, "covariance": DEFAULT_COVARIANCE[family]}
        return data

    @model_validator(mode="after")
    def check_glrt_family(self):
        if DetectionTest.GLRT in self.tests and self.family is not Family.LINEAR:
            raise ValueError("the glrt test is only available for the linear family")
        return self

    @property
    def noise(self):
        return NoiseSpec(self.sigma2)


@dataclass(frozen=True)
class CurveRow:
    normalized_change: float
    test: str
    p_raise: float
    std_err: float
    threshold: float


@dataclass
class ExperimentCurve:
    rows: list
    metadata: dict = field(default_factory=dict)

    def for_test(self, test):
        return [row for row in self.rows if row.test == str(test)]

    def write_csv(self, stream):
        for key, value in self.metadata.items():
            stream.write(f"# {key}: {value}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for row in self.rows:
            writer.writerow(
                [repr(row.normalized_change), row.test, repr(row.p_raise), repr(row.std_err), repr(row.threshold)]
            )

    def to_csv(self):
        buffer = io.StringIO()
        self.write_csv(buffer)
        return buffer.getvalue()

    def summary(self):
        """Per test: p_raise at the first grid point, at 1.0 (if present) and at the last."""
        lines = []
        for test in dict.fromkeys(row.test for row in self.rows):
            rows = self.for_test(test)
            parts = [f"{rows[0].normalized_change:g}: {rows[0].p_raise:.4f}"]
            at_one = [r for r in rows if math.isclose(r.normalized_change, 1.0)]
            if at_one and at_one[0] is not rows[0] and at_one[0] is not rows[-1]:
                parts.append(f"1: {at_one[0].p_raise:.4f}")
            if len(rows) > 1:
                parts.append(f"{rows[-1].normalized_change:g}: {rows[-1].p_raise:.4f}")
            lines.append(f"{test}: " + ", ".join(parts))
        return lines


def make_parameter_pair(rng, family, d, normalized_change, rho):
    """
    Parameter pair at a given normalized change.

    Linear: theta ~ N(0, I) and a unit direction u, both fixed by ``rng``;
    theta' = theta + normalized_change * rho * u.

    Logistic: theta uniform on the unit sphere; theta' is theta rotated by
    phi in a random plane containing theta, where the chord
    2 sin(phi / 2) equals normalized_change * rho.
    """
    if not normalized_change >= 0:
        raise DomainError(f"normalized_change must be >= 0, got {normalized_change}.")
    family = Family(family)
    generator = rng.generator() if isinstance(rng, numstat.RngStream) else rng
    theta = generator.standard_normal(d)
    other = generator.standard_normal(d)
    shift = normalized_change * rho

    if family is Family.LINEAR:
        u = other / np.linalg.norm(other)
        return theta, theta + shift * u

    theta = theta / np.linalg.norm(theta)
    if shift == 0:
        return theta, theta.copy()
    if shift > 2.0:
        raise DomainError(f"Unit vectors cannot differ by {shift:.6g} > 2.")
    if d < 2:
        raise DomainError("A rotation needs d >= 2.")
    e = other - (other @ theta) * theta
    e = e / np.linalg.norm(e)
    phi = 2.0 * math.asin(shift / 2.0)
    return theta, math.cos(phi) * theta + math.sin(phi) * e


def _plugin_chi2_alarm(rho, alpha):
    """Per trial: [alarm, eta] with eta from the trial's own plug-in covariance."""

    def statistic(ctx):
        stat = difference_statistic(ctx.pre_fit, ctx.post_fit)
        eta = chi2_threshold(stat.eigen, rho, alpha).eta
        config = DetectionConfig(rho=rho, alpha=alpha, threshold_method=ThresholdMethod.CHI2_APPROX, eta=eta)
        return [float(edt_decide(stat, config).raised), eta]

    return statistic


def experiment_design(spec):
    """Simulation design of an experiment: the base theta is the pre-change parameter of every grid point."""
    parameter_stream = numstat.RngStream(spec.seed).substream(PARAMETER_STREAM)
    base_theta, _ = make_parameter_pair(parameter_stream, spec.family, spec.d, 0.0, spec.rho)
    return DesignSpec(family=spec.family, n=spec.n, n_prime=spec.n_prime, base_theta=base_theta, noise=spec.noise)


def experiment_boundary(spec):
    """The experiment's own pair at normalized change 1, where every threshold is calibrated."""
    parameter_stream = numstat.RngStream(spec.seed).substream(PARAMETER_STREAM)
    return make_parameter_pair(parameter_stream, spec.family, spec.d, 1.0, spec.rho)


def calibration_stream(spec):
    return numstat.RngStream(spec.seed).substream(CALIBRATION_STREAM)


def nominal_chi2_threshold(spec, design, boundary):
    sigma = design.nominal_sigma_delta(*boundary)
    return chi2_threshold(numstat.eigh(sigma), spec.rho, spec.alpha)


def check_glr_threshold(report):
    """A zero GLRT threshold would raise the alarm on every trial."""
    if report.eta > 0:
        return
    positive = report.diagnostics["positive_fraction"]
    raise DomainError(
        f"alpha={report.alpha} is not below the fraction {positive:.4f} of boundary trials with a positive "
        f"likelihood ratio, so the calibrated GLRT threshold is 0; use alpha < {positive:.4f}."
    )


def run_experiment(spec):
    """
    Resolve every test's threshold once, then sweep the grid with fresh
    datasets per trial. The curve is fully determined by ``spec``.
    """
    root = numstat.RngStream(spec.seed)
    parameter_stream = root.substream(PARAMETER_STREAM)
    design = experiment_design(spec)
    boundary = experiment_boundary(spec)
    tests = list(spec.tests)
    chi2_mode = spec.covariance if DetectionTest.EDT_CHI2 in tests else None

    with tracer.start_as_current_span("run_experiment") as span:
        span.set_attribute("family", str(spec.family))
        span.set_attribute("grid_points", len(spec.grid))
        span.set_attribute("trials_per_point", spec.trials_per_point)
        logger.info(
            f"Experiment: family={spec.family}, d={spec.d}, n={spec.n}, n'={spec.n_prime}, "
            f"rho={spec.rho:.6g}, alpha={spec.alpha}, tests={','.join(map(str, tests))}"
        )

        thresholds = {}
        calibration_stats = {}
        if DetectionTest.EDT_MC in tests:
            calibration_stats["edt"] = edt_statistic
        if DetectionTest.GLRT in tests:
            calibration_stats["glr"] = glr_statistic(spec.rho)
        moments = chi2_mode is CovarianceMode.SIMULATED
        if calibration_stats or moments:
            reports = mc_calibrate(
                design,
                spec.rho,
                spec.alpha,
                spec.calibration_trials,
                calibration_stream(spec),
                calibration_stats,
                workers=spec.workers,
                boundary=boundary,
                moments=moments,
            )
            if "edt" in reports:
                thresholds[DetectionTest.EDT_MC] = reports["edt"].eta
            if "glr" in reports:
                check_glr_threshold(reports["glr"])
                thresholds[DetectionTest.GLRT] = reports["glr"].eta
            if moments:
                thresholds[DetectionTest.EDT_CHI2] = reports[SIMULATED_CHI2].eta
        if chi2_mode is CovarianceMode.NOMINAL:
            thresholds[DetectionTest.EDT_CHI2] = nominal_chi2_threshold(spec, design, boundary).eta

        sweep_stats = {}
        for test, eta in thresholds.items():
            if test is DetectionTest.GLRT:
                sweep_stats[str(test)] = glr_alarm(spec.rho, eta)
            else:
                method = ThresholdMethod.MONTE_CARLO if test is DetectionTest.EDT_MC else ThresholdMethod.CHI2_APPROX
                config = DetectionConfig(rho=spec.rho, alpha=spec.alpha, threshold_method=method, eta=eta)
                sweep_stats[str(test)] = edt_alarm(config)
        if chi2_mode is CovarianceMode.PLUGIN:
            sweep_stats[str(DetectionTest.EDT_CHI2)] = _plugin_chi2_alarm(spec.rho, spec.alpha)

        rows = []
        for g, change in enumerate(spec.grid):
            theta, theta_prime = make_parameter_pair(parameter_stream, spec.family, spec.d, change, spec.rho)
            values = simulate_statistics(
                design,
                theta,
                theta_prime,
                spec.trials_per_point,
                root.substream(SWEEP_STREAM, g),
                sweep_stats,
                workers=spec.workers,
                grid_point=g,
            )
            for test in tests:
                outcome = values[str(test)]
                if outcome.ndim == 2:
                    raised, threshold = outcome[:, 0], float(np.mean(outcome[:, 1]))
                else:
                    raised, threshold = outcome, float(thresholds[test])
                estimate = alarm_rate(raised)
                rows.append(
                    CurveRow(
                        normalized_change=float(change),
                        test=str(test),
                        p_raise=estimate.p,
                        std_err=estimate.std_err,
                        threshold=threshold,
                    )
                )
            logger.info(
                f"Grid point {change:g}: "
                + ", ".join(f"{r.test}={r.p_raise:.4f}" for r in rows[-len(tests):])
            )

    resolved = {str(test): eta for test, eta in thresholds.items()}
    if chi2_mode is CovarianceMode.PLUGIN:
        resolved[str(DetectionTest.EDT_CHI2)] = "plugin (per trial; threshold column is the mean)"

    metadata = {
        "spec": json.dumps(spec.model_dump(mode="json", exclude={"workers"}), sort_keys=True),
        "seed": spec.seed,
        "thresholds": json.dumps(resolved, sort_keys=True),
        "threshold_methods": json.dumps(
            {
                str(t): str(ThresholdMethod.CHI2_APPROX if t is DetectionTest.EDT_CHI2 else ThresholdMethod.MONTE_CARLO)
                for t in tests
            },
            sort_keys=True,
        ),
        "parameters": "theta and change direction fixed per experiment; datasets redrawn per trial",
        "base_theta": json.dumps([float(v) for v in design.base_theta]),
        "calibration_pair": json.dumps([[float(v) for v in boundary[0]], [float(v) for v in boundary[1]]]),
    }
    return ExperimentCurve(rows=rows, metadata=metadata)
