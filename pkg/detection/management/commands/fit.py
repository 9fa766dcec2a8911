"""
Management command to fit a model family to a dataset CSV.

Usage: python manage.py fit data.csv --family logistic
"""

import logging

import numpy as np

from detection import families
from detection.management.base import DetectionCommand

logger = logging.getLogger(__name__)


def format_vector(values):
    return "[" + ", ".join(f"{float(v):.10g}" for v in values) + "]"


class Command(DetectionCommand):
    help = "Fit the maximum likelihood model to a dataset CSV (header y,x1,...,xd)"

    def add_command_arguments(self, parser):
        parser.add_argument("dataset", type=str, help="Path to the dataset CSV")

    def run(self, *args, **options):
        config = self.load_config(options)
        data = families.Dataset.from_csv(options["dataset"], config.family)
        fitted = families.fit_mle(data, config.noise)
        eigenvalues = np.linalg.eigvalsh(fitted.fisher_per_sample)

        self.stdout.write(f"family: {fitted.family}")
        self.stdout.write(f"n: {fitted.n}")
        self.stdout.write(f"d: {fitted.d}")
        self.stdout.write(f"theta_hat: {format_vector(fitted.theta_hat)}")
        self.stdout.write(f"neg_log_lik: {fitted.neg_log_lik:.10g}")
        self.stdout.write(
            f"fisher_per_sample eigenvalues: [{eigenvalues.min():.6g}, {eigenvalues.max():.6g}]"
        )
        if fitted.iterations:
            self.diagnostic(f"Newton iterations: {fitted.iterations}")
