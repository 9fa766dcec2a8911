"""
Shared base class for the detection management commands.

Adds the common flags, loads the run configuration and converts domain
exceptions into CommandError exit codes (2 for input errors, 3 for
numerical failures).
"""

import logging

from django.core.management.base import BaseCommand

from detection.config import build_config, parse_run_config
from detection.exceptions import handle_command_exception

logger = logging.getLogger(__name__)


class DetectionCommand(BaseCommand):
    config_required = False

    def add_arguments(self, parser):
        parser.add_argument(
            "--config",
            type=str,
            required=self.config_required,
            help="Path to a key = value run configuration file",
        )
        parser.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
        parser.add_argument("--trials", type=int, help="Monte Carlo calibration trials")
        parser.add_argument("--out", type=str, help="Output path")
        parser.add_argument("--family", choices=["linear", "logistic"], help="Model family")
        parser.add_argument("--rho", type=float, help="Change magnitude threshold rho")
        parser.add_argument("--alpha", type=float, help="False alarm budget alpha")
        parser.add_argument("--method", choices=["mc", "chi2"], help="Threshold method")
        parser.add_argument("--sigma2", type=float, help="Known noise variance (linear family)")
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_config(self, options):
        """Run configuration from --config (if any) with command-line overrides applied."""
        overrides = {
            key: options.get(key)
            for key in ("seed", "trials", "family", "rho", "alpha", "method", "sigma2")
        }
        if options.get("config"):
            return parse_run_config(options["config"], command=self.command_name, overrides=overrides)
        return build_config({k: v for k, v in overrides.items() if v is not None})

    @property
    def command_name(self):
        return self.__module__.rsplit(".", 1)[-1]

    def handle(self, *args, **options):
        try:
            self.run(*args, **options)
        except Exception as exc:
            raise handle_command_exception(exc) from exc

    def run(self, *args, **options):
        raise NotImplementedError

    def diagnostic(self, message):
        self.stderr.write(message)
