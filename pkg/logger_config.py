"""
Logging configuration for EffIQ
Daily application log, console output and a per-stage run.log in the output directory
"""

import logging
import os
from datetime import datetime

import config

FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CONSOLE_FORMAT = '%(levelname)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
RUN_LOG_NAME = "run.log"

# Daily log file, relocatable through EFFIQ_LOG_DIR
LOGS_DIR = os.environ.get(config.LOG_DIR_ENV_VAR, "logs")
os.makedirs(LOGS_DIR, exist_ok=True)
LOG_FILE = os.path.join(LOGS_DIR, f"effiq_{datetime.now().strftime('%Y-%m-%d')}.log")


def _file_handler(path: str) -> logging.Handler:
    handler = logging.FileHandler(path)
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
    return handler


def _console_handler() -> logging.Handler:
    handler = logging.StreamHandler()
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    return handler


# Application logger; children are "EffIQ.<component>"
logger = logging.getLogger("EffIQ")
logger.setLevel(logging.DEBUG)
if not logger.handlers:
    logger.addHandler(_file_handler(LOG_FILE))
    logger.addHandler(_console_handler())


def get_logger(name: str) -> logging.Logger:
    """Get a component logger"""
    return logging.getLogger(f"EffIQ.{name}")


def attach_run_log(out_dir: str, filename: str = RUN_LOG_NAME) -> logging.Handler:
    """
    Mirror everything logged during a stage into <out_dir>/run.log

    Returns the handler so the caller can detach it with detach_run_log.
    """
    os.makedirs(out_dir, exist_ok=True)
    handler = _file_handler(os.path.join(out_dir, filename))
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    handler.close()
