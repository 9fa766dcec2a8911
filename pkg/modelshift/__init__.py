"""
modelshift project initialization

Sets up OpenTelemetry tracing when the SDK packages are installed.
"""

import logging

logger = logging.getLogger(__name__)

try:
    from .tracing import init_telemetry

    init_telemetry()
except ImportError as e:
    logger.warning(
        "OpenTelemetry SDK not found. Tracing is disabled. "
        f"Error: {e}"
    )
except Exception as e:
    logger.error(
        f"Failed to initialize OpenTelemetry tracing: {e}. "
        "Continuing without tracing..."
    )
