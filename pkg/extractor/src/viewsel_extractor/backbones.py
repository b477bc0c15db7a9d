"""Feature backbones and their registry.

A backbone turns a batch of preprocessed images into one embedding per
image. The package ships a tiny deterministic stub for integration tests and
offline smoke runs; real pretrained encoders plug in through
register_backbone without touching the export pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    """What the pipeline needs to know about an encoder."""

    name: str
    dim: int
    supported_sizes: tuple[int, ...]
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


class StubBackbone:
    """Deterministic 16-dim embedding: 8x8 block means through a fixed map.

    The weight matrix comes from a hard-coded seed, so identical images give
    identical embeddings on every machine and run. Only 224x224 inputs are
    supported; the grid size must divide the input side.
    """

    GRID = 8

    def __init__(self):
        self.spec = BackboneSpec(name="stub16", dim=16, supported_sizes=(224,))
        rng = np.random.default_rng(1457203)
        n_in = self.GRID * self.GRID * 3
        self._w = (rng.standard_normal((n_in, self.spec.dim)) / np.sqrt(n_in)).astype(
            np.float32
        )
        self._b = np.zeros(self.spec.dim, dtype=np.float32)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        """(N, S, S, 3) normalized images -> (N, 16) float32 embeddings."""
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim != 4 or batch.shape[3] != 3:
            raise ConfigError(f"expected (N, S, S, 3) batch, got shape {batch.shape}")
        size = batch.shape[1]
        if batch.shape[2] != size or size not in self.spec.supported_sizes:
            raise ConfigError(
                f"backbone {self.spec.name} supports input sizes "
                f"{self.spec.supported_sizes}, got {batch.shape[1]}x{batch.shape[2]}"
            )
        block = size // self.GRID
        n = batch.shape[0]
        pooled = batch.reshape(n, self.GRID, block, self.GRID, block, 3).mean(
            axis=(2, 4)
        )
        flat = pooled.reshape(n, -1)
        return (flat @ self._w + self._b).astype(np.float32)


_REGISTRY: dict[str, Callable[[], object]] = {}


def register_backbone(name: str, factory: Callable[[], object],
                      overwrite: bool = False) -> None:
    """Add an encoder under a new name; rejects silent replacement."""
    if name in _REGISTRY and not overwrite:
        raise ConfigError(f"backbone {name!r} is already registered")
    _REGISTRY[name] = factory


def get_backbone(name: str):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown backbone {name!r}, registered: {sorted(_REGISTRY)}"
        ) from None
    return factory()


def registered_backbones() -> list[str]:
    return sorted(_REGISTRY)


register_backbone("stub16", StubBackbone)
