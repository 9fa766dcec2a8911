"""
Django settings for the modelshift project.

The project has no database, URLs or templates; it hosts the ``detection``
app whose management commands are the command-line surface.
"""

from pathlib import Path
import os
import logging
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("SECRET_KEY", "django-insecure-modelshift-local-only")

DEBUG = os.environ.get("DEBUG", "False") == "True"

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    "detection.apps.ChangeDetectionConfig",
]

DATABASES = {}

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Detection settings
MODELSHIFT_WORKERS = int(os.environ.get("MODELSHIFT_WORKERS", "1"))
MODELSHIFT_DEFAULT_TRIALS = int(os.environ.get("MODELSHIFT_DEFAULT_TRIALS", "10000"))
MODELSHIFT_LOG_LEVEL = os.environ.get("MODELSHIFT_LOG_LEVEL", "DEBUG" if DEBUG else "INFO").upper()

# Logging Configuration
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "[{levelname}] {asctime} {name} {funcName} - {message}",
            "style": "{",
            "datefmt": "%Y-%m-%d %H:%M:%S",
        },
        "simple": {
            "format": "[{levelname}] {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "level": "DEBUG",
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
            "formatter": "verbose" if DEBUG else "simple",
        },
    },
    "loggers": {
        "django": {
            "handlers": ["console"],
            "level": "WARNING",
            "propagate": False,
        },
        "detection": {
            "handlers": ["console"],
            "level": MODELSHIFT_LOG_LEVEL,
            "propagate": False,
        },
        "modelshift": {
            "handlers": ["console"],
            "level": MODELSHIFT_LOG_LEVEL,
            "propagate": False,
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
}

# OpenTelemetry Settings
OTEL_SERVICE_NAME = os.environ.get("OTEL_SERVICE_NAME", "modelshift")
OTEL_EXPORTER_OTLP_ENDPOINT = os.environ.get("OTEL_EXPORTER_OTLP_ENDPOINT", "")
