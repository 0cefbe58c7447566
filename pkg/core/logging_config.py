"""JSON log lines on stderr for simulator runs.

``setup_logging()`` runs once per process (the CLI callback,
``smoke_test.py``).  Modules log through ``logging.getLogger(__name__)``
and pass numbers in ``extra``::

    logger.info("Round complete", extra={"round": 3, "loss": 0.41})

Every line carries timestamp, level, component and message.  Inside
``seed_context(seed)`` it also carries the seed of the experiment being run,
including lines emitted from party worker threads.  Stdout stays free for
tables and reports.
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
import os
import sys
from typing import IO, Iterator

from pythonjsonlogger.json import JsonFormatter

LINE_FIELDS = "%(asctime)s %(levelname)s %(component)s %(message)s"

_current_seed: contextvars.ContextVar[int | None] = contextvars.ContextVar("protoevfl_seed", default=None)

# asyncio reports every slow callback at DEBUG
_QUIET = ("asyncio",)


class RunContextFilter(logging.Filter):
    """Stamps ``component`` (last part of the logger name) and the active seed."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.component = record.name.rsplit(".", 1)[-1]
        seed = _current_seed.get()
        if seed is not None and not hasattr(record, "seed"):
            record.seed = seed
        return True


@contextlib.contextmanager
def seed_context(seed: int) -> Iterator[None]:
    token = _current_seed.set(int(seed))
    try:
        yield
    finally:
        _current_seed.reset(token)


def build_handler(stream: IO[str] | None = None) -> logging.Handler:
    handler = logging.StreamHandler(stream if stream is not None else sys.stderr)
    handler.setFormatter(JsonFormatter(LINE_FIELDS, rename_fields={"asctime": "timestamp", "levelname": "level"}))
    handler.addFilter(RunContextFilter())
    return handler


def setup_logging(level: str | None = None, stream: IO[str] | None = None) -> None:
    """Route every logger through one JSON handler; ``LOG_LEVEL`` applies when ``level`` is None."""
    log_level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(build_handler(stream))
    root.setLevel(log_level)
    for name in _QUIET:
        logging.getLogger(name).setLevel(logging.WARNING)
