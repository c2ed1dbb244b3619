import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

from .config import settings

# (record attribute, rendered key) in output order
STRUCTURED_FIELDS = (
    ('action', 'ACTION'),
    ('job_id', 'JOB'),
    ('worker_id', 'WORKER'),
    ('role', 'ROLE'),
    ('channel', 'CHANNEL'),
    ('round', 'ROUND'),
    ('compute_id', 'COMPUTE'),
    ('event_id', 'EVENT'),
    ('status', 'STATUS'),
    ('error_code', 'ERROR_CODE'),
)

RESERVED_ATTRS = {'name', 'msg', 'args', 'created', 'filename', 'funcName',
                  'levelname', 'levelno', 'lineno', 'module', 'msecs', 'message',
                  'pathname', 'process', 'processName', 'relativeCreated', 'thread',
                  'threadName', 'exc_info', 'exc_text', 'stack_info', 'taskName'}

class StructuredFormatter(logging.Formatter):
    """Pipe-separated structured lines for the log file"""

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.fromtimestamp(record.created).isoformat()
        parts = [f"[{timestamp}]", record.levelname]

        for attr, key in STRUCTURED_FIELDS:
            value = getattr(record, attr, None)
            if value is not None:
                parts.append(f"{key}={value}")

        parts.append(f"MSG={record.getMessage()}")
        if record.exc_info:
            parts.append(self.formatException(record.exc_info).replace("\n", " / "))
        return " | ".join(parts)

def setup_logger(name: str = "fedorch", log_level: Optional[int] = None,
                 log_dir: Optional[str] = None) -> logging.Logger:
    """
    Setup structured logging with file and console output

    Args:
        name: Logger name
        log_level: Logging level (default: settings.LOG_LEVEL)
        log_dir: Directory for the daily log file (default: settings.LOG_DIR)

    Returns:
        Configured logger instance
    """
    if log_level is None:
        log_level = logging.getLevelName(settings.LOG_LEVEL.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO

    directory = Path(log_dir or settings.LOG_DIR)
    directory.mkdir(parents=True, exist_ok=True)

    today = datetime.now().strftime("%Y-%m-%d")
    log_file = directory / f"fedorch_{today}.log"

    logger = logging.getLogger(name)
    logger.setLevel(log_level)

    # Clear existing handlers to avoid duplicates
    logger.handlers.clear()
    logger.propagate = False

    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setLevel(log_level)
    file_handler.setFormatter(StructuredFormatter())

    # Console stays terse; stderr keeps --json output on stdout clean
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(max(log_level, logging.WARNING))
    console_handler.setFormatter(logging.Formatter('%(levelname)s: %(message)s'))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger

def setup_trace_logger(enabled: bool, stream=None) -> logging.Logger:
    """Tasklet trace lines go to their own logger with a bare format"""
    trace = logging.getLogger("fedorch.trace")
    trace.handlers.clear()
    trace.propagate = False
    trace.setLevel(logging.INFO if enabled else logging.CRITICAL + 1)
    handler = logging.StreamHandler(stream or sys.stdout)
    handler.setFormatter(logging.Formatter('%(message)s'))
    trace.addHandler(handler)
    return trace

def log_action(logger: logging.Logger, action: str, level: int = logging.INFO, **kwargs):
    """
    Log a lifecycle action with structured data

    Args:
        logger: Logger instance
        action: Action type (e.g., 'JOB_CREATED', 'CHANNEL_JOINED', 'VALIDATION_FAILED')
        level: Logging level for the record
        **kwargs: Structured fields (job_id, worker_id, channel, round, error_code, message, ...)
    """
    msg = kwargs.pop('message', kwargs.pop('msg', action))

    extra = {'action': action}
    for key, value in kwargs.items():
        if key not in RESERVED_ATTRS:
            extra[key] = value

    logger.log(level, f"{action}: {msg}", extra=extra)

# Global logger instance
logger = setup_logger()
