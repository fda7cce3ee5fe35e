"""Environment configuration and logging setup."""

import logging
import os
import sys

DATA_DIR = os.environ.get("INCEPTOFORMER_DATA_DIR", "data")

# Default worker cap for --jobs. Invalid values fall back to 1.
JOBS = 1
_jobs = os.environ.get("INCEPTOFORMER_JOBS", "").strip()
if _jobs:
    try:
        JOBS = max(1, int(_jobs))
    except ValueError:
        print(f"Warning: Invalid INCEPTOFORMER_JOBS format: {_jobs}", file=sys.stderr)

LOG_LEVEL = os.environ.get("INCEPTOFORMER_LOG_LEVEL", "INFO").strip().upper() or "INFO"
if LOG_LEVEL not in ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"):
    print(f"Warning: Invalid INCEPTOFORMER_LOG_LEVEL: {LOG_LEVEL}", file=sys.stderr)
    LOG_LEVEL = "INFO"


def configure_logging(level=None):
    """Route package logs to stderr as ``[LEVEL] message`` lines."""
    logging.basicConfig(
        level=getattr(logging, level or LOG_LEVEL),
        format="[%(levelname)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )
