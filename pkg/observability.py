"""
Observability entry point for the grid estimator.

Telemetry is initialized ONCE per process via init_telemetry().
Library modules only emit spans and MUST NOT initialize telemetry.
"""

import os

from utils.telemetry import init_telemetry as _install_console_tracing

_initialized = False


def init_telemetry(workflow_name: str) -> bool:
    """Enable console span export when GRIDBP_TELEMETRY=console. Returns True if enabled."""
    global _initialized
    if _initialized:
        return True
    if os.getenv("GRIDBP_TELEMETRY", "").lower() != "console":
        return False
    _install_console_tracing(workflow_name)
    _initialized = True
    return True


if __name__ == "__main__":
    print("Initializing telemetry...")
    print("enabled" if init_telemetry("gridbp") else "disabled (set GRIDBP_TELEMETRY=console)")
