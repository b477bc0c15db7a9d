"""On-disk feature cache and manifest handling.

Cache layout: the 5 magic bytes "VSPF1", then five little-endian u32 words
(version, num_samples, levels, views, dim), then the payload as float32
little-endian, row-major over (sample, level, view, dim). A stack is the
(levels, views, dim) block for one plant-day.

The reader keeps the file descriptor open and serves random access through
os.pread, so concurrent readers never share mutable state.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, ValidationError

MAGIC = b"VSPF1"
VERSION = 1
_HEADER_WORDS = struct.Struct("<5I")
HEADER_SIZE = len(MAGIC) + _HEADER_WORDS.size

SPLITS = ("train", "val", "test")

MANIFEST_COLUMNS = (
    "crop",
    "plant_id",
    "day",
    "age_days",
    "leaf_count",
    "split",
    "cache_index",
)


@dataclass(frozen=True)
class FeatureCacheHeader:
    version: int
    num_samples: int
    levels: int
    views: int
    dim: int

    def __post_init__(self):
        if self.num_samples < 0:
            raise ValidationError("num_samples must be >= 0")
        for field in ("levels", "views", "dim"):
            if getattr(self, field) < 1:
                raise ValidationError(f"{field} must be >= 1")

    @property
    def stack_shape(self) -> tuple[int, int, int]:
        return (self.levels, self.views, self.dim)

    @property
    def floats_per_stack(self) -> int:
        return self.levels * self.views * self.dim

    @property
    def payload_bytes(self) -> int:
        return self.num_samples * self.floats_per_stack * 4

    def pack(self) -> bytes:
        return MAGIC + _HEADER_WORDS.pack(
            self.version, self.num_samples, self.levels, self.views, self.dim
        )


def write_cache(stacks: Sequence[np.ndarray], path, *, empty_shape=(5, 24, 1)) -> FeatureCacheHeader:
    """Write stacks to a cache file and return its header.

    All stacks must share one (levels, views, dim) shape. An empty sequence
    writes a valid zero-sample cache using empty_shape for the header
    geometry.
    """
    arrays = [np.asarray(s, dtype=np.float32) for s in stacks]
    if arrays:
        shape = arrays[0].shape
        if len(shape) != 3:
            raise ShapeError(f"stacks must be 3-d (levels, views, dim), got {shape}")
        for i, a in enumerate(arrays):
            if a.shape != shape:
                raise ShapeError(f"stack {i} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"stack {i} contains non-finite values")
    else:
        shape = tuple(empty_shape)
    header = FeatureCacheHeader(VERSION, len(arrays), *shape)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header.pack())
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)
    return header


class FeatureCache:
    """Lazy random-access reader over a cache file.

    Immutable after open; stack(i) goes through os.pread so any number of
    threads can read concurrently.
    """

    def __init__(self, path):
        self._path = str(path)
        self._fd = -1  # so __del__ is safe if open() raises
        self._fd = os.open(self._path, os.O_RDONLY)
        try:
            head = os.pread(self._fd, HEADER_SIZE, 0)
            if len(head) < HEADER_SIZE:
                raise FormatError(f"{self._path}: file shorter than header")
            if head[: len(MAGIC)] != MAGIC:
                raise FormatError(
                    f"{self._path}: bad magic {head[: len(MAGIC)]!r}, expected {MAGIC!r}"
                )
            words = _HEADER_WORDS.unpack(head[len(MAGIC) :])
            if words[0] != VERSION:
                raise FormatError(f"{self._path}: unsupported version {words[0]}")
            try:
                self.header = FeatureCacheHeader(*words)
            except ValidationError as e:
                raise FormatError(f"{self._path}: invalid header: {e}") from e
            actual = os.fstat(self._fd).st_size
            expected = HEADER_SIZE + self.header.payload_bytes
            if actual != expected:
                raise FormatError(
                    f"{self._path}: size {actual} bytes, expected {expected}"
                )
        except Exception:
            os.close(self._fd)
            self._fd = -1
            raise

    def __len__(self) -> int:
        return self.header.num_samples

    def stack(self, i: int) -> np.ndarray:
        if not 0 <= i < self.header.num_samples:
            raise IndexError(
                f"sample index {i} out of range for {self.header.num_samples} samples"
            )
        nbytes = self.header.floats_per_stack * 4
        raw = os.pread(self._fd, nbytes, HEADER_SIZE + i * nbytes)
        if len(raw) != nbytes:
            raise FormatError(f"{self._path}: short read at sample {i}")
        values = np.frombuffer(raw, dtype="<f4").reshape(self.header.stack_shape)
        values = np.array(values, dtype=np.float32)
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{self._path}: non-finite values in sample {i}")
        return values

    __getitem__ = stack

    def read_all(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0,) + self.header.stack_shape, dtype=np.float32)
        return np.stack([self.stack(i) for i in range(len(self))])

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def __del__(self):
        try:
            self.close()
        except OSError:
            pass


def read_cache(path) -> FeatureCache:
    """Open a cache for lazy access; header is available immediately."""
    return FeatureCache(path)


@dataclass(frozen=True, order=True)
class SampleKey:
    crop: str
    plant_id: str
    day: int


@dataclass(frozen=True)
class ManifestEntry:
    key: SampleKey
    age_days: float
    leaf_count: float
    split: str
    cache_index: int


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow(
                [
                    e.key.crop,
                    e.key.plant_id,
                    e.key.day,
                    repr(float(e.age_days)),
                    repr(float(e.leaf_count)),
                    e.split,
                    e.cache_index,
                ]
            )


def _parse_row(row: dict, line_no: int) -> ManifestEntry:
    def bad(msg):
        return ValidationError(f"manifest line {line_no}: {msg}")

    try:
        day = int(row["day"])
        age = float(row["age_days"])
        leaf = float(row["leaf_count"])
        cache_index = int(row["cache_index"])
    except (TypeError, ValueError) as e:
        raise bad(f"unparsable numeric field ({e})") from e
    if day < 0:
        raise bad(f"day must be >= 0, got {day}")
    if age < 0 or not math.isfinite(age):
        raise bad(f"age_days must be finite and >= 0, got {age}")
    if leaf < 0 or not math.isfinite(leaf):
        raise bad(f"leaf_count must be finite and >= 0, got {leaf}")
    if cache_index < 0:
        raise bad(f"cache_index must be >= 0, got {cache_index}")
    split = row["split"].strip()
    if split not in SPLITS:
        raise bad(f"unknown split {split!r}, allowed: {', '.join(SPLITS)}")
    crop = row["crop"].strip()
    plant = row["plant_id"].strip()
    if not crop or not plant:
        raise bad("crop and plant_id must be non-empty")
    return ManifestEntry(SampleKey(crop, plant, day), age, leaf, split, cache_index)


def load_manifest(path) -> list[ManifestEntry]:
    """Load and validate a manifest CSV; duplicate keys are rejected."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty manifest file")
        if set(reader.fieldnames) != set(MANIFEST_COLUMNS):
            raise FormatError(
                f"{path}: manifest columns {reader.fieldnames} do not match "
                f"{list(MANIFEST_COLUMNS)}"
            )
        entries = []
        seen: set[SampleKey] = set()
        for line_no, row in enumerate(reader, start=2):
            entry = _parse_row(row, line_no)
            if entry.key in seen:
                raise ValidationError(
                    f"manifest line {line_no}: duplicate key "
                    f"({entry.key.crop}, {entry.key.plant_id}, {entry.key.day})"
                )
            seen.add(entry.key)
            entries.append(entry)
    return entries


def check_against_cache(entries: Sequence[ManifestEntry], header: FeatureCacheHeader) -> None:
    for e in entries:
        if e.cache_index >= header.num_samples:
            raise ValidationError(
                f"cache_index {e.cache_index} out of range for cache with "
                f"{header.num_samples} samples"
            )


def partition(entries: Sequence[ManifestEntry], merge_train_val: bool = False) -> dict[str, list[int]]:
    """Index lists per split. merge_train_val folds val into train."""
    buckets: dict[str, list[int]] = {s: [] for s in SPLITS}
    for i, e in enumerate(entries):
        if merge_train_val and e.split == "val":
            buckets["train"].append(i)
        else:
            buckets[e.split].append(i)
    return buckets


@dataclass(frozen=True)
class Instance:
    """One training/eval unit: a feature block plus its scalar label.

    Vector mode slices a single level, features (views, dim). Matrix mode
    keeps the whole stack, features (levels, views, dim).
    """

    features: np.ndarray
    label: float
    key: SampleKey
    level: int | None


def _label(entry: ManifestEntry, target: str) -> float:
    if target == "age_days":
        return entry.age_days
    if target == "leaf_count":
        return entry.leaf_count
    raise ConfigError(f"unknown target {target!r}, expected age_days or leaf_count")


def vector_instances(source, entries: Sequence[ManifestEntry], indices: Iterable[int],
                     target: str = "age_days", level: int | None = None) -> list[Instance]:
    """One instance per (sample, level); level restricts to a single level."""
    out = []
    for i in indices:
        e = entries[i]
        stack = source[e.cache_index]
        levels = range(stack.shape[0]) if level is None else (level,)
        for lv in levels:
            if not 0 <= lv < stack.shape[0]:
                raise ConfigError(f"level {lv} out of range for {stack.shape[0]} levels")
            out.append(Instance(stack[lv], _label(e, target), e.key, lv))
    return out


def matrix_instances(source, entries: Sequence[ManifestEntry], indices: Iterable[int],
                     target: str = "age_days") -> list[Instance]:
    """One instance per sample, carrying the full (levels, views, dim) stack."""
    return [
        Instance(source[entries[i].cache_index], _label(entries[i], target),
                 entries[i].key, None)
        for i in indices
    ]
