"""Evaluation module for logging per-replicate risk study results."""

import json
import os
import sys
from datetime import datetime, timezone
from typing import Optional, Sequence

from loguru import logger

import config

_SINK_IDS = {}


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Set the console level and, when evaluation logging is enabled, add a
    rotating JSON file sink for replicate records.

    Safe to call more than once; sinks are replaced, not duplicated.
    """
    level = level or config.LOG_LEVEL
    if "console" in _SINK_IDS:
        logger.remove(_SINK_IDS.pop("console"))
    else:
        # drop loguru's default stderr handler
        logger.remove()
    _SINK_IDS["console"] = logger.add(sys.stderr, level=level)

    if "file" in _SINK_IDS:
        logger.remove(_SINK_IDS.pop("file"))
    if not config.ENABLE_EVALUATION_LOGGING:
        return
    log_file = log_file or config.LOG_FILE_PATH
    folder = os.path.dirname(log_file)
    if folder:
        os.makedirs(folder, exist_ok=True)
    _SINK_IDS["file"] = logger.add(
        log_file,
        level="INFO",
        format="{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}",
        rotation="10 MB",
        serialize=True,  # Write logs as JSON
        filter=lambda record: "replicate" in record["extra"],
    )


def log_replicate_evaluation(
    dims: Sequence[int],
    n: int,
    replicate: int,
    estimator: str,
    loss: Optional[float],
    seed: int,
    error: Optional[str] = None,
    elapsed: Optional[float] = None,
) -> None:
    """Logs the outcome of one estimator on one replicate of a risk study."""
    if not config.ENABLE_EVALUATION_LOGGING:
        return

    log_entry = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "dims": list(dims),
        "n": n,
        "replicate": replicate,
        "estimator": estimator,
        "loss": loss,
        "seed": seed,
        "error": error,
        "elapsed_seconds": elapsed,
    }

    logger.bind(replicate=replicate).info(json.dumps(log_entry))
