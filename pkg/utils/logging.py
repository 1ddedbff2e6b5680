"""
Logging - loguru sink configuration for the CLI and pipeline runs
"""

import os
import sys
from pathlib import Path
from typing import Optional, Union

from loguru import logger

LOG_FORMAT = "{time:HH:mm:ss.SSS} | {level: <7} | {name}:{function} - {message}"


def configure_logging(level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None) -> None:
    """
    Install the stderr sink and, optionally, a run log file sink.

    Args:
        level: Minimum level; falls back to SPRINT_LOG_LEVEL, then INFO
        log_file: Path of a file sink (e.g. <run dir>/run.log)
    """
    level = (level or os.getenv("SPRINT_LOG_LEVEL") or "INFO").upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level="DEBUG", format=LOG_FORMAT, mode="a")
