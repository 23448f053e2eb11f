"""
Logging configuration for vecmap.

Text records use the same layout as the rest of the tooling; JSON records are
produced by python-json-logger so training loss lines can be parsed directly.
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


class RuntimeSettings:
    """Runtime settings read from the environment."""

    def __init__(self):
        """Initialize settings from environment (after loading .env)."""
        load_dotenv()
        self.log_level = os.getenv("LOG_LEVEL", "INFO").upper()
        self.log_format = os.getenv("LOG_FORMAT", "text").lower()
        self.log_file = os.getenv("LOG_FILE") or None
        self.max_workers = int(os.getenv("VECMAP_MAX_WORKERS", "1"))
        self.data_dir = os.getenv("VECMAP_DATA_DIR", "data")

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "log_level": self.log_level,
            "log_format": self.log_format,
            "log_file": self.log_file,
            "max_workers": self.max_workers,
            "data_dir": self.data_dir,
        }


def build_formatter(fmt: str) -> logging.Formatter:
    """
    Build a log formatter.

    Args:
        fmt: "text" or "json"

    Returns:
        Formatter instance
    """
    if fmt == "json":
        return jsonlogger.JsonFormatter(JSON_FORMAT)
    return logging.Formatter(TEXT_FORMAT)


def configure_logging(
    level: str = "INFO",
    fmt: str = "text",
    log_file: Optional[str] = None,
) -> None:
    """
    Configure the root logger.

    Args:
        level: Log level name
        fmt: "text" or "json"
        log_file: Optional path of an additional file handler
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    formatter = build_formatter(fmt)
    for handler in handlers:
        handler.setFormatter(formatter)

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
