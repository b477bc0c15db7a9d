"""Image manifest parsing and view-grid validation.

The input CSV lists one image per row: crop, plant_id, day, level, view,
path, plus optional age_days, leaf_count, and split. Rows group into one
sample per (crop, plant_id, day); a sample must cover the full levels x
views grid exactly once or the manifest is rejected, naming what is missing.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

from .errors import FormatError, ValidationError
from .formats import SPLITS

REQUIRED_COLUMNS = ("crop", "plant_id", "day", "level", "view", "path")
OPTIONAL_COLUMNS = ("age_days", "leaf_count", "split")

SPLIT_FRACTIONS = (0.7, 0.15)


@dataclass(frozen=True)
class ImageRecord:
    crop: str
    plant_id: str
    day: int
    level: int
    view: int
    path: str
    age_days: float | None
    leaf_count: float | None
    split: str | None
    line_no: int


@dataclass
class SampleGroup:
    crop: str
    plant_id: str
    day: int
    paths: dict[tuple[int, int], str]
    age_days: float
    leaf_count: float
    split: str

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.crop, self.plant_id, self.day)


def default_split(crop: str, plant_id: str) -> str:
    """Split membership as a pure function of the plant identity."""
    digest = hashlib.blake2b(f"{crop}/{plant_id}".encode("utf-8"), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2.0 ** 64
    if u < SPLIT_FRACTIONS[0]:
        return "train"
    if u < SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]:
        return "val"
    return "test"


def _parse_row(row: dict, line_no: int) -> ImageRecord:
    def bad(msg):
        return FormatError(f"image manifest line {line_no}: {msg}")

    def non_negative_int(name):
        raw = (row.get(name) or "").strip()
        try:
            value = int(raw)
        except ValueError:
            raise bad(f"{name} must be an integer, got {raw!r}") from None
        if value < 0:
            raise bad(f"{name} must be >= 0, got {value}")
        return value

    def optional_float(name):
        raw = (row.get(name) or "").strip()
        if not raw:
            return None
        try:
            return float(raw)
        except ValueError:
            raise bad(f"{name} must be a number, got {raw!r}") from None

    crop = (row.get("crop") or "").strip()
    plant = (row.get("plant_id") or "").strip()
    path = (row.get("path") or "").strip()
    if not crop or not plant:
        raise bad("crop and plant_id must be non-empty")
    if not path:
        raise bad("path must be non-empty")
    split = (row.get("split") or "").strip() or None
    if split is not None and split not in SPLITS:
        raise bad(f"split must be one of {', '.join(SPLITS)}, got {split!r}")
    return ImageRecord(
        crop=crop,
        plant_id=plant,
        day=non_negative_int("day"),
        level=non_negative_int("level"),
        view=non_negative_int("view"),
        path=path,
        age_days=optional_float("age_days"),
        leaf_count=optional_float("leaf_count"),
        split=split,
        line_no=line_no,
    )


def load_image_manifest(path) -> list[ImageRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty image manifest")
        fields = set(reader.fieldnames)
        missing = set(REQUIRED_COLUMNS) - fields
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        unknown = fields - set(REQUIRED_COLUMNS) - set(OPTIONAL_COLUMNS)
        if unknown:
            raise FormatError(f"{path}: unknown columns {sorted(unknown)}")
        records = [_parse_row(row, i) for i, row in enumerate(reader, start=2)]
    if not records:
        raise ValidationError(f"{path}: image manifest lists no images")
    return records


def _resolve_label(values: set, name: str, key, fallback: float) -> float:
    if len(values) > 1:
        raise ValidationError(
            f"sample {key} has conflicting {name} values: {sorted(values)}"
        )
    return values.pop() if values else fallback


def group_samples(records: list[ImageRecord]) -> tuple[list[SampleGroup], int, int]:
    """Group per (crop, plant, day) and enforce the full view grid.

    Returns the groups in sorted key order plus the (levels, views) geometry
    shared by every sample.
    """
    levels = max(r.level for r in records) + 1
    views = max(r.view for r in records) + 1

    by_key: dict[tuple[str, str, int], dict[tuple[int, int], ImageRecord]] = {}
    for r in records:
        cell = (r.level, r.view)
        slot = by_key.setdefault((r.crop, r.plant_id, r.day), {})
        if cell in slot:
            raise ValidationError(
                f"image manifest line {r.line_no}: duplicate image for sample "
                f"({r.crop}, {r.plant_id}, {r.day}) at level {r.level} view {r.view}"
            )
        slot[cell] = r

    groups = []
    for key in sorted(by_key):
        cells = by_key[key]
        wanted = {(lv, vw) for lv in range(levels) for vw in range(views)}
        missing = sorted(wanted - set(cells))
        if missing:
            shown = ", ".join(f"(level {lv}, view {vw})" for lv, vw in missing[:6])
            more = "" if len(missing) <= 6 else f" and {len(missing) - 6} more"
            raise ValidationError(
                f"sample {key} is missing {len(missing)} of {levels * views} "
                f"images: {shown}{more}"
            )
        rows = list(cells.values())
        crop, plant, day = key
        age = _resolve_label(
            {r.age_days for r in rows if r.age_days is not None},
            "age_days", key, float(day),
        )
        leaf = _resolve_label(
            {r.leaf_count for r in rows if r.leaf_count is not None},
            "leaf_count", key, 0.0,
        )
        split_values = {r.split for r in rows if r.split is not None}
        if len(split_values) > 1:
            raise ValidationError(
                f"sample {key} has conflicting split values: {sorted(split_values)}"
            )
        split = split_values.pop() if split_values else default_split(crop, plant)
        groups.append(
            SampleGroup(
                crop=crop,
                plant_id=plant,
                day=day,
                paths={cell: r.path for cell, r in cells.items()},
                age_days=age,
                leaf_count=leaf,
                split=split,
            )
        )
    return groups, levels, views
