import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

from pythonjsonlogger.json import JsonFormatter

from config.settings import Config

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
AUDIT_LOGGER_NAME = 'ppdl.audit'


def configure_logging(level: str | None = None, log_dir: Path | None = None) -> None:
    """Configure root logging with both file and console handlers."""
    log_level = getattr(logging, (level or Config.LOG_LEVEL).upper())
    log_dir = log_dir or Config.LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)

    file_handler = RotatingFileHandler(
        log_dir / 'ppdl.log',
        maxBytes=10*1024*1024,  # 10MB per file
        backupCount=5
    )
    file_handler.setLevel(log_level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    logging.basicConfig(
        level=log_level,
        format=LOG_FORMAT,
        handlers=[file_handler, console_handler],
        force=True
    )


def open_audit_log(path: Path) -> logging.Logger:
    """
    Attach a line-delimited JSON handler for secure-aggregation transcripts.

    The audit logger does not propagate, so transcript lines never reach the
    console or the rotating run log.
    """
    audit = logging.getLogger(AUDIT_LOGGER_NAME)
    audit.setLevel(logging.INFO)
    audit.propagate = False
    close_audit_log()
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode='w', encoding='utf-8')
    handler.setFormatter(JsonFormatter('%(message)s'))
    audit.addHandler(handler)
    return audit


def close_audit_log() -> None:
    audit = logging.getLogger(AUDIT_LOGGER_NAME)
    for handler in list(audit.handlers):
        handler.close()
        audit.removeHandler(handler)
