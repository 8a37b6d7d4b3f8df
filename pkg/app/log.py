import logging
import sys
import time

import coloredlogs

from app.config import (
    COLOR_LOG,
)

_log_format = "%(asctime)s %(levelname)s [%(run_id)s] %(module)s:%(lineno)d %(funcName)s() %(message)s"
_log_formatter = logging.Formatter(_log_format)


class RunFilter(logging.Filter):
    """Stamps every record with the id of the cli run that produced it"""

    def __init__(self):
        super().__init__()
        self.run_id = ""

    def filter(self, record):
        record.run_id = self.run_id or "-"
        return True


_run_filter = RunFilter()


def set_run_id(run_id: str):
    _run_filter.run_id = run_id
    if run_id:
        LOG.d("run %s started", run_id)


def _get_console_handler():
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(_log_formatter)
    console_handler.formatter.converter = time.gmtime

    return console_handler


def _get_logger(name) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    logger.addHandler(_get_console_handler())
    logger.addFilter(_run_filter)
    logger.propagate = False

    if COLOR_LOG:
        coloredlogs.install(level="DEBUG", logger=logger, fmt=_log_format)

    return logger


logging.Logger.d = logging.Logger.debug
logging.Logger.i = logging.Logger.info
logging.Logger.w = logging.Logger.warning
logging.Logger.e = logging.Logger.exception

LOG = _get_logger("tfnet")


def set_level(level: int):
    """--verbose and --quiet"""
    LOG.setLevel(level)
