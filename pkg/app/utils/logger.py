import json
import logging
import sys
from datetime import datetime, timezone
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

ROOT_LOGGER = "ergodic_hjb"

# Keys copied from logger.info("event.name", extra={...}) into the output
EXTRA_KEYS = (
    "operation", "task", "step", "iterations", "residual", "duration_ms",
    "seed", "status", "error", "error_type", "lam", "horizon", "node",
    "service", "count", "value",
)


def _extras(record: logging.LogRecord) -> dict:
    return {key: getattr(record, key) for key in EXTRA_KEYS if hasattr(record, key)}


class StructuredFormatter(logging.Formatter):
    """One JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "event": record.getMessage(),
            "logger": record.name,
            **_extras(record),
        }
        if record.levelno >= logging.WARNING:
            entry["source"] = f"{record.filename}:{record.lineno}"
        if record.exc_info and record.exc_info[1]:
            exc = record.exc_info[1]
            entry["exception"] = {"type": type(exc).__name__, "message": str(exc)}
        return json.dumps(entry, default=str)


class SimpleFormatter(logging.Formatter):
    """``HH:MM:SS LEVEL event [key=value ...]`` for terminal runs."""

    def __init__(self):
        super().__init__("%(asctime)s %(levelname)-7s %(message)s", datefmt="%H:%M:%S")

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        extras = _extras(record)
        if not extras:
            return line
        return f"{line} [{' '.join(f'{k}={v}' for k, v in extras.items())}]"


def setup_logger(name: str = ROOT_LOGGER, level: Optional[str] = None) -> logging.Logger:
    """
    Configure the package logger once: stderr handler (JSON when
    LOG_FORMAT=json) plus a rotating JSON file when LOG_FILE is set.
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    from app.config import get_settings
    settings = get_settings()

    log_level = getattr(logging, (level or settings.log_level).upper(), logging.INFO)
    logger.setLevel(log_level)
    logger.propagate = False

    # stdout carries CLI results only
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(log_level)
    console.setFormatter(StructuredFormatter() if settings.log_format == "json" else SimpleFormatter())
    logger.addHandler(console)

    if settings.log_file:
        try:
            path = Path(settings.log_file)
            path.parent.mkdir(parents=True, exist_ok=True)
            handler = RotatingFileHandler(path, maxBytes=10 * 1024 * 1024, backupCount=5, encoding="utf-8")
            handler.setLevel(logging.DEBUG)
            handler.setFormatter(StructuredFormatter())
            logger.addHandler(handler)
        except OSError as exc:
            logger.warning("logger.file.unavailable", extra={"error": str(exc)})

    return logger


logger = setup_logger()


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Module loggers are children of the package logger and share its handlers."""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}") if name else logger
