"""
OpenTelemetry configuration for the modelshift project.

Installs an SDK tracer provider so the spans opened around calibration and
experiment sweeps are recorded. Spans leave the process only when
OTEL_EXPORTER_OTLP_ENDPOINT is set.
"""

import os
import logging
from opentelemetry.sdk.resources import Resource
from opentelemetry.semconv.resource import ResourceAttributes
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from opentelemetry.instrumentation.logging import LoggingInstrumentor
from opentelemetry import trace

logger = logging.getLogger(__name__)


def init_telemetry():
    """
    Initialize tracing for the modelshift project.

    Returns:
        The installed TracerProvider
    """
    otlp_endpoint = os.environ.get("OTEL_EXPORTER_OTLP_ENDPOINT", "")

    resource = Resource.create({
        ResourceAttributes.SERVICE_NAME: os.environ.get("OTEL_SERVICE_NAME", "modelshift"),
        ResourceAttributes.SERVICE_VERSION: "1.0.0",
    })

    tracer_provider = TracerProvider(resource=resource)
    if otlp_endpoint:
        from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter

        tracer_provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=otlp_endpoint)))
        logger.debug(f"Exporting spans to {otlp_endpoint}")
    trace.set_tracer_provider(tracer_provider)

    # trace and span ids on every log record
    LoggingInstrumentor().instrument(tracer_provider=tracer_provider, set_logging_format=False)

    return tracer_provider
