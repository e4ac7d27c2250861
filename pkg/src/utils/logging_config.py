"""Logging configuration for the federated GLMM engine."""

import logging
import sys
from typing import Optional

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Loggers of the status API stack that log every request
QUIET_LOGGERS = ("httpx", "httpcore", "uvicorn.access")


def setup_logging(log_level: str = "INFO", log_format: Optional[str] = None, role: Optional[str] = None) -> None:
    """Configure the root logger on stdout.

    Args:
        log_level: The logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: Custom log format string. If None, uses the default format.
        role: Process role (e.g. ``coordinator`` or ``site-3``) prefixed to every line, so
            interleaved output of a local federated run can be told apart.
    """
    fmt = log_format or DEFAULT_FORMAT
    if role:
        fmt = f"[{role}] {fmt}"

    numeric_level = getattr(logging, log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=numeric_level,
        format=fmt,
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stdout,
        force=True,
    )
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    logging.getLogger(__name__).debug(f"Logging configured with level {log_level}, role {role or '-'}")
