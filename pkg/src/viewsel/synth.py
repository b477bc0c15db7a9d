"""Synthetic multi-view dataset generator and a least-squares oracle.

Each plant-day draws a latent y = day + jitter * N(0,1). Informative
(level, view) pairs carry gain * signal_scale * y along a per-level unit
direction; everything else is pure noise. An optional circular smoothing
kernel along the view axis makes adjacent views correlate, mimicking the
near-duplicate content of small camera rotations. Labels: age_days is the
day index (so jitter > 0 sets a common irreducible error floor), leaf_count
is a clipped linear function of the latent.

Gains are drawn in the order the informative pairs are listed and level
directions do not depend on which views are informative, so rotating the
informative set by r rotates the planted signal component by exactly r
along the view axis under the same seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .selection import Selection, SelectionVector
from .store import (
    Instance,
    ManifestEntry,
    SampleKey,
    matrix_instances,
    partition,
    vector_instances,
    write_cache,
    write_manifest,
)
from .util import derived_rng

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class SynthConfig:
    n_plants: int
    n_days: int
    levels: int = 5
    views: int = 24
    dim: int = 32
    signal_scale: float = 1.0
    noise_sigma: float = 0.1
    redundancy_rho: float = 0.0
    informative_views: tuple[tuple[int, int], ...] = ()
    latent_jitter: float = 0.0
    gain_range: tuple[float, float] = (1.0, 1.0)
    leaf_slope: float = 0.5
    leaf_intercept: float = 1.0
    crop: str = "synth"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_plants", "n_days", "levels", "views", "dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.signal_scale < 0 or self.noise_sigma < 0 or self.latent_jitter < 0:
            raise ConfigError("scales and sigmas must be >= 0")
        if not 0.0 <= self.redundancy_rho < 1.0:
            raise ConfigError(f"redundancy_rho must be in [0, 1), got {self.redundancy_rho}")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ConfigError(f"gain_range must satisfy 0 < lo <= hi, got {self.gain_range}")
        # Empty means every (level, view) pair carries signal.
        if not self.informative_views:
            pairs = tuple(
                (lv, vw) for lv in range(self.levels) for vw in range(self.views)
            )
            object.__setattr__(self, "informative_views", pairs)
        else:
            object.__setattr__(
                self, "informative_views", tuple(map(tuple, self.informative_views))
            )
        for lv, vw in self.informative_views:
            if not (0 <= lv < self.levels and 0 <= vw < self.views):
                raise ConfigError(f"informative pair ({lv}, {vw}) out of range")

    @property
    def n_samples(self) -> int:
        return self.n_plants * self.n_days


def plant_split(crop: str, plant_id: str) -> str:
    """Split membership as a pure function of the plant identity."""
    digest = hashlib.blake2b(f"{crop}/{plant_id}".encode("utf-8"), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2.0 ** 64
    if u < SPLIT_FRACTIONS[0]:
        return "train"
    if u < SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]:
        return "val"
    return "test"


def _level_directions(config: SynthConfig) -> np.ndarray:
    rng = derived_rng(config.seed, "directions")
    dirs = np.empty((config.levels, config.dim))
    for lv in range(config.levels):
        vec = rng.standard_normal(config.dim)
        dirs[lv] = vec / np.linalg.norm(vec)
    return dirs


def _signal_map(config: SynthConfig) -> np.ndarray:
    """Per-(level, view) signal direction scaled by gain; multiply by y."""
    dirs = _level_directions(config)
    gains = derived_rng(config.seed, "gains").uniform(
        config.gain_range[0], config.gain_range[1], size=len(config.informative_views)
    )
    m = np.zeros((config.levels, config.views, config.dim))
    for gain, (lv, vw) in zip(gains, config.informative_views):
        m[lv, vw] += gain * config.signal_scale * dirs[lv]
    return m


def latents(config: SynthConfig) -> np.ndarray:
    """Latent y per sample, plant-major then day order."""
    rng = derived_rng(config.seed, "latent")
    days = np.tile(np.arange(config.n_days, dtype=np.float64), config.n_plants)
    return days + config.latent_jitter * rng.standard_normal(config.n_samples)


def planted_signal(config: SynthConfig) -> np.ndarray:
    """Pre-noise, pre-smoothing signal component, (N, levels, views, dim)."""
    m = _signal_map(config)
    return latents(config)[:, None, None, None] * m[None]


def smoothing_kernel(rho: float, views: int) -> np.ndarray:
    """Circular kernel with weight proportional to rho ** distance, sum 1."""
    offsets = np.arange(views)
    dist = np.minimum(offsets, views - offsets)
    w = rho ** dist.astype(np.float64)
    return w / w.sum()


@dataclass
class SynthDataset:
    config: SynthConfig
    stacks: np.ndarray
    entries: list[ManifestEntry]
    latent: np.ndarray

    def save(self, outdir) -> tuple[str, str]:
        import os

        os.makedirs(outdir, exist_ok=True)
        cache_path = os.path.join(str(outdir), "cache.vspf")
        manifest_path = os.path.join(str(outdir), "manifest.csv")
        write_cache(list(self.stacks), cache_path)
        write_manifest(self.entries, manifest_path)
        return cache_path, manifest_path

    def split_indices(self, merge_train_val: bool = False) -> dict[str, list[int]]:
        return partition(self.entries, merge_train_val=merge_train_val)

    def instances(self, mode: str, split: str, target: str = "age_days",
                  level: int | None = None,
                  merge_train_val: bool = False) -> list[Instance]:
        idx = self.split_indices(merge_train_val)[split]
        if mode == "vector":
            return vector_instances(self.stacks, self.entries, idx, target, level)
        if mode == "matrix":
            return matrix_instances(self.stacks, self.entries, idx, target)
        raise ConfigError(f"unknown mode {mode!r}")


def generate(config: SynthConfig) -> SynthDataset:
    """Deterministic per config; identical configs give identical caches."""
    y = latents(config)
    raw = planted_signal(config)
    noise_rng = derived_rng(config.seed, "noise")
    for n in range(config.n_samples):
        raw[n] += config.noise_sigma * noise_rng.standard_normal(
            (config.levels, config.views, config.dim)
        )
    if config.redundancy_rho > 0.0:
        w = smoothing_kernel(config.redundancy_rho, config.views)
        smoothed = np.zeros_like(raw)
        for j in range(config.views):
            if w[j] != 0.0:
                smoothed += w[j] * np.roll(raw, j, axis=2)
        raw = smoothed
    stacks = raw.astype(np.float32)

    entries = []
    for p in range(config.n_plants):
        plant = f"plant_{p:04d}"
        split = plant_split(config.crop, plant)
        for d in range(config.n_days):
            n = p * config.n_days + d
            leaf = max(0.0, config.leaf_slope * y[n] + config.leaf_intercept)
            entries.append(
                ManifestEntry(
                    key=SampleKey(config.crop, plant, d),
                    age_days=float(d),
                    leaf_count=leaf,
                    split=split,
                    cache_index=n,
                )
            )
    return SynthDataset(config=config, stacks=stacks, entries=entries, latent=y)


def _selected_mean(features: np.ndarray, sel: Selection) -> np.ndarray:
    # boolean-mask indexing flattens the selected rows for either rank:
    # (V, D) under a (V,) mask and (L, V, D) under a (L, V) mask
    return features[sel.bits].mean(axis=0)


def _design(instances: Sequence[Instance], sel: Selection) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([
        _selected_mean(np.asarray(inst.features, dtype=np.float64), sel)
        for inst in instances
    ])
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.array([inst.label for inst in instances], dtype=np.float64)
    return x, y


def ols_fit(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Normal equations in double precision; ridge fallback when singular."""
    gram = x.T @ x
    rhs = x.T @ y
    try:
        w = np.linalg.solve(gram, rhs)
        if not np.all(np.isfinite(w)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        w = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs)
    return w


def oracle_mae(dataset: SynthDataset, sel: Selection, target: str = "age_days",
               level: int | None = None) -> float:
    """Validation MAE of an ordinary-least-squares fit on the mean of the
    selected views' features. A strong linear reference any trained fusion
    model should approach or beat."""
    mode = "vector" if isinstance(sel, SelectionVector) else "matrix"
    train = dataset.instances(mode, "train", target, level)
    val = dataset.instances(mode, "val", target, level)
    if not train or not val:
        raise ConfigError("oracle needs non-empty train and val splits")
    xt, yt = _design(train, sel)
    xv, yv = _design(val, sel)
    w = ols_fit(xt, yt)
    return float(np.mean(np.abs(xv @ w - yv)))


def mean_baseline_mae(dataset: SynthDataset, target: str = "age_days",
                      mode: str = "vector", level: int | None = None) -> float:
    """Validation MAE of always predicting the train-split mean label."""
    train = dataset.instances(mode, "train", target, level)
    val = dataset.instances(mode, "val", target, level)
    if not train or not val:
        raise ConfigError("baseline needs non-empty train and val splits")
    center = float(np.mean([inst.label for inst in train]))
    return float(np.mean([abs(center - inst.label) for inst in val]))


def rotated_informative(config: SynthConfig, r: int) -> SynthConfig:
    """Same config with every informative view index shifted by r (mod V)."""
    pairs = tuple((lv, (vw + r) % config.views) for lv, vw in config.informative_views)
    return replace(config, informative_views=pairs)
