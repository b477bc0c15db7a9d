"""Writers for the feature-cache interchange format and its manifest.

Cache layout: the 5 magic bytes "VSPF1", then five little-endian u32 words
(version, num_samples, levels, views, dim), then float32 little-endian
payload, row-major over (sample, level, view, dim). The manifest is a CSV
with columns crop, plant_id, day, age_days, leaf_count, split, cache_index.
Both files are the complete interface to downstream consumers; nothing else
is shared.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

MAGIC = b"VSPF1"
VERSION = 1
_HEADER_WORDS = struct.Struct("<5I")

MANIFEST_COLUMNS = (
    "crop",
    "plant_id",
    "day",
    "age_days",
    "leaf_count",
    "split",
    "cache_index",
)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    crop: str
    plant_id: str
    day: int
    age_days: float
    leaf_count: float
    split: str
    cache_index: int

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(
                f"split must be one of {', '.join(SPLITS)}, got {self.split!r}"
            )
        if self.day < 0 or self.cache_index < 0:
            raise ValidationError("day and cache_index must be >= 0")


def write_cache(stacks: np.ndarray, path) -> None:
    """Write (num_samples, levels, views, dim) float32 stacks as one cache."""
    stacks = np.ascontiguousarray(stacks, dtype=np.float32)
    if stacks.ndim != 4:
        raise ConfigError(
            f"cache payload must be (samples, levels, views, dim), got shape {stacks.shape}"
        )
    if not np.isfinite(stacks).all():
        raise ValidationError("cache payload contains non-finite values")
    n, levels, views, dim = stacks.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER_WORDS.pack(VERSION, n, levels, views, dim))
        f.write(stacks.astype("<f4", copy=False).tobytes())


def write_manifest(rows: list[ManifestRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.crop,
                    r.plant_id,
                    r.day,
                    repr(float(r.age_days)),
                    repr(float(r.leaf_count)),
                    r.split,
                    r.cache_index,
                ]
            )


def write_sidecar(info: dict, path) -> None:
    """Provenance JSON next to the cache: backbone, sizes, crop fractions."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(info, f, sort_keys=True, indent=2)
        f.write("\n")
