# utils/telemetry.py - OpenTelemetry integration for tracing

from opentelemetry import trace
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor


def init_telemetry(service_name: str = "gridbp"):
    """
    Install an SDK tracer provider that prints finished spans to the console.

    Returns:
        Tracer: tracer for the calling module
    """
    trace_provider = TracerProvider()
    trace_provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
    trace.set_tracer_provider(trace_provider)
    return trace.get_tracer(service_name)


def get_tracer(name: str):
    """Tracer for library modules; a no-op until init_telemetry has run."""
    return trace.get_tracer(name)
