"""
Management command to calibrate the empirical difference test threshold
for a simulated design, by Monte Carlo or by the chi-squared bound.

With --out, one row per run is appended to a calibration log CSV.
"""

import csv
import logging
import os

from detection.config import MethodName
from detection.exceptions import ConfigError, OutputError
from detection.management.base import DetectionCommand
from detection.simharness import (
    CovarianceMode,
    calibration_stream,
    experiment_boundary,
    experiment_design,
    nominal_chi2_threshold,
)
from detection.threshold import edt_statistic, mc_calibrate, simulated_chi2_threshold

logger = logging.getLogger(__name__)

LOG_HEADER = [
    "method",
    "family",
    "d",
    "n",
    "n_prime",
    "alpha",
    "rho",
    "eta",
    "trials",
    "std_err",
    "lambda_max",
    "lambda_min",
    "noncentrality",
    "seed",
]


class Command(DetectionCommand):
    help = "Resolve the detection threshold eta for a run configuration"
    config_required = True

    def run(self, *args, **options):
        config = self.load_config(options)
        spec = config.experiment_spec()
        design = experiment_design(spec)
        boundary = experiment_boundary(spec)

        if config.method is MethodName.MC:
            report = mc_calibrate(
                design, spec.rho, spec.alpha, spec.calibration_trials, calibration_stream(spec), {"edt": edt_statistic},
                workers=spec.workers, boundary=boundary,
            )["edt"]
            trials, std_err = report.diagnostics["trials"], report.std_err
            lambda_max = lambda_min = noncentrality = ""
        else:
            if spec.covariance is CovarianceMode.PLUGIN:
                raise ConfigError("covariance = plugin resolves eta per trial; choose nominal or simulated to calibrate.")
            if spec.covariance is CovarianceMode.SIMULATED:
                report = simulated_chi2_threshold(
                    design, spec.rho, spec.alpha, spec.calibration_trials, calibration_stream(spec),
                    workers=spec.workers, boundary=boundary,
                )
                trials = report.diagnostics["trials"]
            else:
                report = nominal_chi2_threshold(spec, design, boundary)
                trials = ""
            std_err = ""
            lambda_max = report.diagnostics["lambda_max"]
            lambda_min = report.diagnostics["lambda_min"]
            noncentrality = report.diagnostics["noncentrality"]

        self.stdout.write(f"eta: {report.eta!r}")
        self.stdout.write(f"method: {report.method}")
        self.stdout.write(f"alpha: {report.alpha!r}")
        self.stdout.write(f"rho: {spec.rho!r}")
        if config.method is MethodName.MC:
            self.diagnostic(f"trials: {trials}, standard error: {std_err:.4g}")
        else:
            self.diagnostic(
                f"lambda_max: {lambda_max:.6g}, lambda_min: {lambda_min:.6g}, "
                f"non-centrality bound: {noncentrality:.6g}"
            )

        if options.get("out"):
            row = [
                str(config.method),
                str(spec.family),
                spec.d,
                spec.n,
                spec.n_prime,
                repr(spec.alpha),
                repr(spec.rho),
                repr(report.eta),
                trials,
                repr(std_err) if std_err != "" else "",
                repr(lambda_max) if lambda_max != "" else "",
                repr(lambda_min) if lambda_min != "" else "",
                repr(noncentrality) if noncentrality != "" else "",
                spec.seed,
            ]
            self.append_row(options["out"], row)

    def append_row(self, path, row):
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
        try:
            with open(path, "a", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                if new_file:
                    writer.writerow(LOG_HEADER)
                writer.writerow(row)
        except OSError as exc:
            raise OutputError(f"Cannot write calibration log {path}: {exc.strerror}")
        logger.info(f"Appended calibration row to {path}")
