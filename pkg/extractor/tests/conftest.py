"""Builders shared by the exporter tests: image grids and their manifests."""

import csv

import numpy as np
import pytest
from PIL import Image

COLUMNS = ("crop", "plant_id", "day", "level", "view", "path")


def save_noise_image(path, rng, size=32):
    arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    Image.fromarray(arr).save(path)


@pytest.fixture
def write_rows(tmp_path):
    """CSV writer for manifest rows; returns the file path."""

    def write(rows, columns=COLUMNS, name="images.csv"):
        path = tmp_path / name
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            writer.writerows(rows)
        return path

    return write


@pytest.fixture
def build_grid(tmp_path, write_rows):
    """Write a complete image grid and its manifest for the given samples.

    Returns (manifest_path, rows); tests mutate rows and re-run write_rows
    to produce broken manifests.
    """

    def build(samples=(("okra", "p1", 1), ("okra", "p2", 1)), levels=2,
              views=3, size=32, seed=0):
        rng = np.random.default_rng(seed)
        img_dir = tmp_path / "images"
        img_dir.mkdir(exist_ok=True)
        rows = []
        for crop, plant, day in samples:
            for lv in range(levels):
                for vw in range(views):
                    path = img_dir / f"{crop}_{plant}_d{day}_l{lv}_v{vw}.png"
                    save_noise_image(path, rng, size)
                    rows.append([crop, plant, day, lv, vw, str(path)])
        return write_rows(rows), rows

    return build
