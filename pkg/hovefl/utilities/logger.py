"""
Logging utilities for runs with file and console output.
"""
import logging
import os
import threading
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

LEVEL_ENV = "HOVEFL_LOG_LEVEL"

_registry_lock = threading.Lock()


def log_level() -> int:
    """Level named by $HOVEFL_LOG_LEVEL (DEBUG/INFO/WARNING/ERROR), INFO by default."""
    name = os.environ.get(LEVEL_ENV, "INFO").strip().upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def setup_logger(name: str, log_file: Path | list[Path] | None = None, printing: bool = True) -> logging.Logger:
    """
    Setup logger with file and optional console output.

    Args:
        name (str): logger name, one per run
        log_file (Path | list[Path] | None): path(s) of log files to append to
        printing (bool): whether to enable console output with rich formatting

    Returns:
        logging.Logger: configured logger
    """
    logger = logging.getLogger(name)
    level = log_level()
    logger.setLevel(level)
    logger.propagate = False

    if log_file is None:
        log_files = []
    else:
        log_files = [log_file] if isinstance(log_file, Path) else log_file

    formatter = logging.Formatter("%(asctime)s - %(message)s")
    for lf in log_files:
        lf.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(lf, encoding="utf-8")
        fh.setLevel(level)
        fh.setFormatter(formatter)
        logger.addHandler(fh)
    if printing:
        console = Console(stderr=True, soft_wrap=True)
        rh = RichHandler(console=console, rich_tracebacks=True, show_path=False)
        rh.setLevel(level)
        logger.addHandler(rh)
    return logger


def clean_logger(logger: logging.Logger | str) -> None:
    """
    Remove and close every handler of a logger and release its name, so per-run
    loggers do not accumulate in the logging registry.

    Args:
        logger (logging.Logger | str): logger instance or its name
    """
    if isinstance(logger, str):
        logger = logging.getLogger(logger)
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()
    with _registry_lock:
        registry = logging.Logger.manager.loggerDict
        if registry.get(logger.name) is not logger:
            return
        del registry[logger.name]
        # placeholders of dotted ancestors keep a reference to the logger
        parent = logger.name
        while "." in parent:
            parent = parent.rsplit(".", 1)[0]
            node = registry.get(parent)
            if isinstance(node, logging.PlaceHolder):
                node.loggerMap.pop(logger, None)
                if not node.loggerMap:
                    del registry[parent]
