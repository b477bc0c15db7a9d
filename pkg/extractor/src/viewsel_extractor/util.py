"""Logging shared by the exporter modules."""

from __future__ import annotations

import logging
import os

_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

LOG_ENV_VAR = "VSP_LOG_LEVEL"


def configure_logging(stream=None) -> logging.Logger:
    name = os.environ.get(LOG_ENV_VAR, "warn").strip().lower()
    handler = logging.StreamHandler(stream)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("viewsel_extractor")
    root.handlers[:] = [handler]
    root.setLevel(_LEVELS.get(name, logging.WARNING))
    root.propagate = False
    return root


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger("viewsel_extractor." + name)
