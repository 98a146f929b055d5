"""Overlap — Logging setup (one call from the CLI)."""

import logging
from typing import Optional

from overlap.core.config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure the root `overlap` logger with a stream handler and an optional file."""
    logger = logging.getLogger("overlap")
    logger.setLevel((level or settings.LOG_LEVEL).upper())
    logger.handlers.clear()
    logger.propagate = False

    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    logger.addHandler(stream)

    path = log_file or settings.LOG_FILE
    if path:
        file_handler = logging.FileHandler(path, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
