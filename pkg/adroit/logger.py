"""
Centralized logging configuration for the ADROIT toolkit
========================================================

Every module takes ``logger = get_logger(__name__)``; the CLI calls one of the
``init_*`` helpers once. Files rotate under ``LOG_DIR``; the console shows only
warnings unless debug mode is on, so long training runs stay readable. Seeds
train on worker threads, so file records carry the thread name.
"""

import logging
import os
from logging.handlers import RotatingFileHandler
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

FILE_FORMAT = "[%(asctime)s] [%(levelname)s] [%(threadName)s] [%(name)s:%(lineno)d] - %(message)s"
CONSOLE_FORMAT = "[%(levelname)s] %(message)s"
DEBUG_CONSOLE_FORMAT = "[%(levelname)s] [%(threadName)s] %(name)s: %(message)s"

# Chatty at INFO during graph compilation and thread-pool startup
QUIET_LOGGERS = ("langgraph", "langchain_core", "urllib3")


def _level(name: str) -> int:
    level = logging.getLevelName(name.upper())
    if not isinstance(level, int):
        raise ValueError(f"unknown log level: {name}")
    return level


class AppLogger:
    """Root-logger setup with file rotation and a quiet console"""

    _loggers: Dict[str, logging.Logger] = {}
    _initialized = False
    log_filepath: Optional[str] = None

    @classmethod
    def setup_logging(cls, log_dir: str = "./logs", log_level: str = "INFO",
                      console_level: Optional[str] = None, max_bytes: int = 10 * 1024 * 1024,
                      backup_count: int = 30, debug_mode: bool = False):
        """
        Configure the root logger

        Args:
            log_dir: Directory for log files
            log_level: Level for file output (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            console_level: Level for console output; defaults to log_level in debug mode, WARNING otherwise
            max_bytes: Size at which the log file rotates
            backup_count: Number of rotated files kept
            debug_mode: Verbose console with thread and logger names
        """
        if cls._initialized:
            logging.getLogger(__name__).debug("Logging already initialized, skipping setup")
            return

        file_level = _level(log_level)
        if console_level is None:
            console_level = log_level if debug_mode else "WARNING"
        stream_level = _level(console_level)

        Path(log_dir).mkdir(parents=True, exist_ok=True)
        cls.log_filepath = os.path.join(log_dir, f"adroit_{datetime.now().strftime('%Y%m%d')}.log")

        file_handler = RotatingFileHandler(cls.log_filepath, maxBytes=max_bytes,
                                           backupCount=backup_count, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
        file_handler.setLevel(file_level)

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter(DEBUG_CONSOLE_FORMAT if debug_mode else CONSOLE_FORMAT))
        console_handler.setLevel(stream_level)

        root_logger = logging.getLogger()
        root_logger.setLevel(min(file_level, stream_level))
        root_logger.handlers.clear()
        root_logger.addHandler(file_handler)
        root_logger.addHandler(console_handler)
        if not debug_mode:
            for name in QUIET_LOGGERS:
                logging.getLogger(name).setLevel(logging.WARNING)

        cls._initialized = True
        root_logger.info(f"🗒️ Logging to {cls.log_filepath} "
                         f"(file {logging.getLevelName(file_level)}, console {logging.getLevelName(stream_level)})")

    @classmethod
    def reset_logging(cls):
        """Drop all handlers so the next setup starts clean (tests, re-configuration)"""
        root_logger = logging.getLogger()
        for handler in list(root_logger.handlers):
            handler.close()
        root_logger.handlers.clear()
        cls._initialized = False
        cls._loggers.clear()
        cls.log_filepath = None

    @classmethod
    def get_logger(cls, name: str) -> logging.Logger:
        """Get or create the logger for a module (usually ``__name__``)"""
        if name not in cls._loggers:
            cls._loggers[name] = logging.getLogger(name)
        return cls._loggers[name]


def get_logger(name: str) -> logging.Logger:
    """Convenience accessor for ``AppLogger.get_logger``"""
    return AppLogger.get_logger(name)


def init_logging(log_dir="./logs", log_level="INFO", console_level=None, debug_mode=False,
                 max_bytes=10 * 1024 * 1024, backup_count=30):
    """Initialize logging with custom configuration"""
    AppLogger.setup_logging(
        log_dir=log_dir,
        log_level=log_level,
        console_level=console_level,
        max_bytes=max_bytes,
        backup_count=backup_count,
        debug_mode=debug_mode,
    )


def init_debug_logging(log_dir="./logs", log_level="DEBUG", max_bytes=10 * 1024 * 1024, backup_count=30):
    """Debug mode: every record reaches the console"""
    AppLogger.setup_logging(log_dir=log_dir, log_level=log_level, max_bytes=max_bytes,
                            backup_count=backup_count, debug_mode=True)
