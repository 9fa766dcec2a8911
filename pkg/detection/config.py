"""
Run configuration for the management commands.

A run configuration is a flat ``key = value`` file with ``#`` comments.
Unknown keys are rejected and values are validated by a pydantic model;
``dumps`` writes the canonical form, which parses back to an equal config.
"""

import logging
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .conf import get_setting
from .detector import DetectionConfig, ThresholdMethod
from .exceptions import ConfigError
from .families import Family, NoiseSpec
from .simharness import DEFAULT_GRID, LOGISTIC_RHO, CovarianceMode, DetectionTest, ExperimentSpec

logger = logging.getLogger(__name__)

LIST_KEYS = {"grid", "tests"}

REQUIRED_KEYS = {
    "calibrate": {"family", "d", "n", "n_prime", "alpha", "method"},
    "simulate": {"family", "d", "n", "n_prime", "alpha", "tests"},
}


class MethodName(str, Enum):
    MC = "mc"
    CHI2 = "chi2"

    def __str__(self):
        return self.value

    @property
    def threshold_method(self):
        return ThresholdMethod.MONTE_CARLO if self is MethodName.MC else ThresholdMethod.CHI2_APPROX


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    family: Family = Family.LINEAR
    d: int = Field(default=10, ge=1)
    n: int = Field(default=40, ge=1)
    n_prime: int = Field(default=40, ge=1)
    sigma2: float = Field(default=1.0, gt=0)
    rho: Optional[float] = Field(default=None, gt=0)
    alpha: float = Field(default=0.1, gt=0, lt=1)
    method: MethodName = MethodName.CHI2
    tests: List[DetectionTest] = Field(default_factory=lambda: [DetectionTest.EDT_MC])
    grid: List[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    trials: int = Field(default_factory=lambda: get_setting("MODELSHIFT_DEFAULT_TRIALS"), ge=100)
    trials_per_point: int = Field(default=2000, ge=100)
    seed: int = Field(default=0, ge=0, lt=2**64)
    workers: Optional[int] = Field(default=None, ge=1)
    covariance: Optional[CovarianceMode] = None

    @property
    def resolved_rho(self):
        if self.rho is not None:
            return self.rho
        return 1.0 if self.family is Family.LINEAR else LOGISTIC_RHO

    @property
    def noise(self):
        return NoiseSpec(self.sigma2)

    def with_overrides(self, **overrides):
        """Return a copy with every non-None override applied and re-validated."""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return build_config(values)

    def detection_config(self):
        return DetectionConfig(rho=self.resolved_rho, alpha=self.alpha, threshold_method=self.method.threshold_method)

    def experiment_spec(self):
        try:
            return ExperimentSpec(
                family=self.family,
                d=self.d,
                n=self.n,
                n_prime=self.n_prime,
                sigma2=self.sigma2,
                rho=self.resolved_rho,
                alpha=self.alpha,
                grid=self.grid,
                trials_per_point=self.trials_per_point,
                calibration_trials=self.trials,
                tests=self.tests,
                covariance=self.covariance,
                seed=self.seed,
                workers=self.workers,
            )
        except ValidationError as exc:
            raise ConfigError(_describe(exc))


def _describe(exc):
    return "; ".join(f"{'.'.join(map(str, e['loc'])) or 'config'}: {e['msg']}" for e in exc.errors())


def build_config(values):
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigError(_describe(exc))


def parse_lines(lines, source="<config>"):
    """Parse ``key = value`` lines into a dict of raw values."""
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        if key not in RunConfig.model_fields:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        if key in LIST_KEYS:
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[key] = value
    return values


def parse_run_config(path, command=None, overrides=None):
    """
    Read and validate a run configuration file.

    Args:
        path: Path to the key = value file
        command: Subcommand name whose required keys must be present
        overrides: Command-line values taking precedence over the file

    Returns:
        RunConfig
    """
    try:
        with open(path, encoding="utf-8") as handle:
            values = parse_lines(handle, source=str(path))
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except UnicodeDecodeError:
        raise ConfigError(f"Config file is not valid UTF-8: {path}")

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    missing = REQUIRED_KEYS.get(command, set()) - set(values) - set(overrides)
    if missing:
        raise ConfigError(f"{path}: missing required key(s) for {command}: {', '.join(sorted(missing))}")

    values.update(overrides)
    config = build_config(values)
    logger.debug(f"Loaded run config from {path}: {dumps(config)!r}")
    return config


def _format(value):
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    return str(value)


def dumps(config):
    """Canonical ``key = value`` text, one key per line, unset keys omitted."""
    lines = []
    for key in RunConfig.model_fields:
        value = getattr(config, key)
        if value is None:
            continue
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


def loads(text, source="<string>"):
    return build_config(parse_lines(text.splitlines(), source=source))
