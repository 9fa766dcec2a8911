"""
Management command to run an experiment sweep and write the curve CSV.

Usage: python manage.py simulate --config linear.conf --out curve.csv
"""

import logging
import os

from detection.exceptions import OutputError
from detection.management.base import DetectionCommand
from detection.simharness import run_experiment

logger = logging.getLogger(__name__)


class Command(DetectionCommand):
    help = "Estimate P{alarm} over a grid of normalized model changes and write the curve CSV"
    config_required = True

    def run(self, *args, **options):
        out = options.get("out")
        if not out:
            raise OutputError("--out is required for simulate")
        directory = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
            raise OutputError(f"Output directory is not writable: {directory}")
        if os.path.isdir(out) or (os.path.exists(out) and not os.access(out, os.W_OK)):
            raise OutputError(f"Output path is not writable: {out}")

        spec = self.load_config(options).experiment_spec()
        curve = run_experiment(spec)

        try:
            with open(out, "w", newline="", encoding="utf-8") as handle:
                curve.write_csv(handle)
        except OSError as exc:
            raise OutputError(f"Cannot write {out}: {exc.strerror}")
        logger.info(f"Wrote {len(curve.rows)} curve rows to {out}")

        for line in curve.summary():
            self.stdout.write(line)
