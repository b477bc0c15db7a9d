"""Multi-view plant trait regression with binary view selection.

The package predicts scalar traits (age in days, leaf count) from stacks of
per-view embeddings. Views are chosen by binary selection vectors (one height
level) or matrices (all levels); training augments each instance with a random
circular rotation of the selection, and inference averages predictions over
all rotations, which makes the result invariant to how the camera ring was
oriented. Fusion is a small pre-norm transformer encoder over the selected
tokens, trained with a cautious variant of AdamW under a cosine schedule.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DeterminismError,
    FormatError,
    NumericError,
    ShapeError,
    ValidationError,
    ViewselError,
)

__all__ = [
    "ConfigError",
    "DeterminismError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "ValidationError",
    "ViewselError",
    "__version__",
]
