"""End-to-end export: images -> embeddings -> feature cache + manifest.

One embedding per image, assembled into a (levels, views, dim) stack per
(plant, day) sample. The cache, manifest, and provenance sidecar land next
to each other in the output directory; those files are the entire contract
with downstream training code.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .backbones import get_backbone
from .errors import ConfigError, IngestError
from .formats import ManifestRow, write_cache, write_manifest, write_sidecar
from .ingest import SampleGroup, group_samples, load_image_manifest
from .preprocess import crop_fraction, preprocess_image, resolve_crop_boxes
from .util import get_logger

log = get_logger("extract")

INPUT_SIZES = (224, 518)


@dataclass(frozen=True)
class ExtractConfig:
    image_manifest: str
    out_dir: str
    backbone: str = "stub16"
    input_size: int = 224
    crop_boxes: dict[str, float] | None = None
    batch_size: int = 16
    device: str = "cpu"
    skip_bad: bool = False

    def __post_init__(self):
        if self.input_size not in INPUT_SIZES:
            raise ConfigError(
                f"input_size must be one of {INPUT_SIZES}, got {self.input_size}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # validates fractions and the wheat identity rule up front
        resolve_crop_boxes(self.crop_boxes)


@dataclass
class ExportResult:
    cache_path: str
    manifest_path: str
    sidecar_path: str
    num_samples: int
    levels: int
    views: int
    dim: int
    skipped: list[tuple[str, str, int]] = field(default_factory=list)


def _embed_group(group: SampleGroup, levels: int, views: int, backbone,
                 boxes: dict[str, float], config: ExtractConfig) -> np.ndarray:
    tensors = []
    for lv in range(levels):
        for vw in range(views):
            tensors.append(
                preprocess_image(
                    group.paths[(lv, vw)], group.crop, config.input_size,
                    boxes, backbone.spec,
                )
            )
    flat = np.stack(tensors)
    chunks = [
        backbone.embed(flat[i : i + config.batch_size])
        for i in range(0, len(flat), config.batch_size)
    ]
    embeddings = np.concatenate(chunks, axis=0)
    return embeddings.reshape(levels, views, backbone.spec.dim)


def extract_and_export(config: ExtractConfig) -> ExportResult:
    """Run the full pipeline; returns the written paths and geometry."""
    records = load_image_manifest(config.image_manifest)
    groups, levels, views = group_samples(records)
    backbone = get_backbone(config.backbone)
    if config.input_size not in backbone.spec.supported_sizes:
        raise ConfigError(
            f"backbone {backbone.spec.name} supports input sizes "
            f"{backbone.spec.supported_sizes}, got {config.input_size}"
        )
    boxes = resolve_crop_boxes(config.crop_boxes)

    stacks = []
    kept: list[SampleGroup] = []
    skipped: list[tuple[str, str, int]] = []
    for group in groups:
        try:
            stacks.append(_embed_group(group, levels, views, backbone, boxes, config))
        except IngestError as e:
            if not config.skip_bad:
                raise
            log.warning("skipping sample %s: %s", group.key, e)
            skipped.append(group.key)
            continue
        kept.append(group)
    if not kept:
        raise IngestError("no samples survived extraction")

    rows = [
        ManifestRow(
            crop=g.crop,
            plant_id=g.plant_id,
            day=g.day,
            age_days=g.age_days,
            leaf_count=g.leaf_count,
            split=g.split,
            cache_index=i,
        )
        for i, g in enumerate(kept)
    ]

    # provenance covers crops outside the default table too (applied at 1.0)
    fractions = dict(boxes)
    for g in kept:
        fractions.setdefault(g.crop, crop_fraction(g.crop, boxes))

    os.makedirs(config.out_dir, exist_ok=True)
    cache_path = os.path.join(config.out_dir, "cache.vspf")
    manifest_path = os.path.join(config.out_dir, "manifest.csv")
    sidecar_path = os.path.join(config.out_dir, "extract_info.json")
    write_cache(np.stack(stacks), cache_path)
    write_manifest(rows, manifest_path)
    write_sidecar(
        {
            "backbone": backbone.spec.name,
            "dim": backbone.spec.dim,
            "input_size": config.input_size,
            "normalization": {"mean": backbone.spec.mean, "std": backbone.spec.std},
            "crop_fractions": fractions,
            "num_samples": len(kept),
            "levels": levels,
            "views": views,
            "skipped_samples": [list(k) for k in skipped],
            "image_manifest": str(config.image_manifest),
        },
        sidecar_path,
    )
    log.info(
        "exported %d samples (%d levels x %d views x dim %d), skipped %d",
        len(kept), levels, views, backbone.spec.dim, len(skipped),
    )
    return ExportResult(
        cache_path=cache_path,
        manifest_path=manifest_path,
        sidecar_path=sidecar_path,
        num_samples=len(kept),
        levels=levels,
        views=views,
        dim=backbone.spec.dim,
        skipped=skipped,
    )
