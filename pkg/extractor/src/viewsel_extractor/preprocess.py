"""Image loading, crop-specific center cropping, resizing, normalization.

Cropping removes static border areas around the plant; the fraction is per
crop species and wheat is never cropped. Everything downstream of the file
read is pure array math, so a fixed file gives a fixed tensor.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backbones import BackboneSpec
from .errors import ConfigError, IngestError

WHEAT = "wheat"

DEFAULT_CROP_BOXES = {
    "okra": 0.8,
    "radish": 0.8,
    "mustard": 0.8,
    WHEAT: 1.0,
}


def resolve_crop_boxes(overrides: dict[str, float] | None) -> dict[str, float]:
    """Merge user fractions over the defaults, keeping wheat at identity."""
    boxes = dict(DEFAULT_CROP_BOXES)
    for crop, fraction in (overrides or {}).items():
        if crop == WHEAT and fraction != 1.0:
            raise ConfigError("wheat images are never cropped; fraction must be 1.0")
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(
                f"crop fraction for {crop!r} must be in (0, 1], got {fraction}"
            )
        boxes[crop] = fraction
    return boxes


def crop_fraction(crop_id: str, boxes: dict[str, float]) -> float:
    if crop_id == WHEAT:
        return 1.0
    return boxes.get(crop_id, 1.0)


def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise IngestError(f"cannot read image {path}: {e}") from e


def center_crop(img: Image.Image, fraction: float) -> Image.Image:
    if fraction >= 1.0:
        return img
    w, h = img.size
    cw, ch = int(round(w * fraction)), int(round(h * fraction))
    left = (w - cw) // 2
    top = (h - ch) // 2
    return img.crop((left, top, left + cw, top + ch))


def preprocess_image(path, crop_id: str, input_size: int,
                     boxes: dict[str, float], spec: BackboneSpec) -> np.ndarray:
    """File path -> normalized (input_size, input_size, 3) float32 tensor."""
    img = load_image(path)
    img = center_crop(img, crop_fraction(crop_id, boxes))
    img = img.resize((input_size, input_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    return (arr - mean) / std
