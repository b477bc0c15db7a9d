"""Seed derivation and logging helpers.

All randomness in the package flows from numpy Generators seeded through
seed_sequence(), which mixes a master seed with hashed string/int tags.
Distinct tags give independent substreams, so adding a new consumer of
randomness never perturbs existing ones.
"""

from __future__ import annotations

import hashlib
import logging
import os

import numpy as np

_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

LOG_ENV_VAR = "VSP_LOG_LEVEL"


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence for a named substream of the master seed."""
    return np.random.SeedSequence([int(master_seed)] + [_tag_to_int(t) for t in tags])


def derived_rng(master_seed: int, *tags) -> np.random.Generator:
    """Generator seeded from the master seed plus hashed tags."""
    return np.random.default_rng(seed_sequence(master_seed, *tags))


def derived_seed(master_seed: int, *tags) -> int:
    """Stable integer seed for the same substream scheme.

    Used where a plain int must be recorded (configs, logs, result rows).
    """
    return int(seed_sequence(master_seed, *tags).generate_state(1, np.uint64)[0])


def log_level_from_env(default: str = "warn") -> int:
    name = os.environ.get(LOG_ENV_VAR, default).strip().lower()
    return _LEVELS.get(name, _LEVELS[default])


def configure_logging(stream=None) -> logging.Logger:
    """Set up the package logger honoring VSP_LOG_LEVEL.

    The format carries no timestamps on purpose: repeated runs with identical
    inputs should produce byte-identical logs.
    """
    handler = logging.StreamHandler(stream)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("viewsel")
    root.handlers[:] = [handler]
    root.setLevel(log_level_from_env())
    root.propagate = False
    return root


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger("viewsel." + name)
