"""Image-to-feature exporter for view-selection caches.

Turns a directory of multi-view plant images into the flat feature cache
and sample manifest consumed by the viewsel trainer: one embedding per
(level, view) cell, packed as VSPF1 with a CSV manifest alongside.
"""

from .backbones import (
    BackboneSpec,
    StubBackbone,
    get_backbone,
    register_backbone,
    registered_backbones,
)
from .errors import (
    ConfigError,
    ExtractorError,
    FormatError,
    IngestError,
    ValidationError,
)
from .extract import ExtractConfig, ExportResult, extract_and_export
from .formats import ManifestRow, write_cache, write_manifest
from .ingest import ImageRecord, SampleGroup, group_samples, load_image_manifest
from .preprocess import (
    DEFAULT_CROP_BOXES,
    crop_fraction,
    preprocess_image,
    resolve_crop_boxes,
)

__all__ = [
    "BackboneSpec",
    "ConfigError",
    "DEFAULT_CROP_BOXES",
    "ExportResult",
    "ExtractConfig",
    "ExtractorError",
    "FormatError",
    "ImageRecord",
    "IngestError",
    "ManifestRow",
    "SampleGroup",
    "StubBackbone",
    "ValidationError",
    "crop_fraction",
    "extract_and_export",
    "get_backbone",
    "group_samples",
    "load_image_manifest",
    "preprocess_image",
    "register_backbone",
    "registered_backbones",
    "resolve_crop_boxes",
    "write_cache",
    "write_manifest",
]

__version__ = "0.1.0"
