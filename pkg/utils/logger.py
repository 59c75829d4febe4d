import logging
import os
import uuid
from logging import StreamHandler, Formatter

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s | run_id=%(run_id)s"

# One id per process so every component of a run can be grepped together.
RUN_ID = os.getenv("GRIDBP_RUN_ID", uuid.uuid4().hex[:12])

_configured: set[str] = set()


class RunIdAdapter(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        # Ensure run_id is always present
        if 'extra' not in kwargs:
            kwargs['extra'] = {}
        kwargs['extra']['run_id'] = self.extra.get('run_id', RUN_ID)
        return msg, kwargs


def get_logger(name: str = "GridBP") -> logging.LoggerAdapter:
    logger = logging.getLogger(name)
    if not logger.hasHandlers():
        handler = StreamHandler()
        handler.setFormatter(Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    logger.setLevel(os.getenv("GRIDBP_LOG_LEVEL", "INFO").upper())
    _configured.add(name)
    return RunIdAdapter(logger, {"run_id": RUN_ID})


def set_level(level: str) -> None:
    """Force the level of every logger handed out by get_logger, now and later."""
    os.environ["GRIDBP_LOG_LEVEL"] = level.upper()
    for name in _configured:
        logging.getLogger(name).setLevel(level.upper())
