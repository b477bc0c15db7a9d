"""Random-search driver over candidate selections.

Structured baselines run first, then random draws. Every candidate trains a
fresh model from a candidate-specific derived seed and is scored by
rotation-averaged validation MAE. The per-candidate seed depends only on the
master seed and the candidate's index, so raising n_candidates never changes
earlier rows. Candidates are independent and may run in a thread pool;
results merge in index order, making the table identical for any worker
count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import ConfigError
from .fusion import FusionConfig
from .inference import evaluate
from .selection import (
    Selection,
    all_views_pattern,
    first_view_pattern,
    random_pattern,
    save_selection,
    serialize,
    stride_pattern,
    structured_matrix,
)
from .store import Instance
from .training import TrainConfig, budgeted_epochs, train
from .util import derived_rng, derived_seed, get_logger

log = get_logger("search")

MODES = ("vector", "matrix")
DEFAULT_DENSITY = {"vector": 0.25, "matrix": 0.10}


@dataclass(frozen=True)
class SearchConfig:
    mode: str
    n_candidates: int = 32
    density: float | None = None
    epochs_per_candidate: int | None = None
    include_baselines: bool = True
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_candidates < 0:
            raise ConfigError("n_candidates must be >= 0")
        if not self.include_baselines and self.n_candidates == 0:
            raise ConfigError("no candidates: enable baselines or request random draws")
        if self.density is not None and not 0.0 < self.density < 1.0:
            raise ConfigError(f"density must be in (0, 1), got {self.density}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def resolved_density(self) -> float:
        return self.density if self.density is not None else DEFAULT_DENSITY[self.mode]


@dataclass(frozen=True)
class CandidateResult:
    name: str
    selection: Selection
    views: int
    val_mae: float
    val_rmse: float
    epochs: int
    seed: int


@dataclass
class SearchResult:
    rows: list[CandidateResult]

    @property
    def best(self) -> CandidateResult:
        return self.rows[0]

    def row_named(self, name: str) -> CandidateResult:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


def vector_baselines(views: int = 24) -> list[tuple[str, Selection]]:
    out: list[tuple[str, Selection]] = [("all views", all_views_pattern(views))]
    for stride, name in ((2, "every 2nd"), (4, "every 4th")):
        if stride <= views:
            out.append((name, stride_pattern(stride, views)))
    out.append(("first view", first_view_pattern(views)))
    return out


def matrix_baselines(levels: int = 5, views: int = 24) -> list[tuple[str, Selection]]:
    # strides that exceed the ring size only apply at full scale
    specs = [(1, 0, "all views"), (2, 1, "every 2nd, shift 1"),
             (3, 1, "every 3rd, shift 1"), (6, 1, "every 6th, shift 1"),
             (12, 2, "every 12th, shift 2")]
    return [
        (name, structured_matrix(stride, shift, levels, views))
        for stride, shift, name in specs
        if stride <= views
    ]


def candidate_list(config: SearchConfig, levels: int, views: int) -> list[tuple[str, Selection]]:
    out: list[tuple[str, Selection]] = []
    if config.include_baselines:
        out.extend(
            vector_baselines(views) if config.mode == "vector"
            else matrix_baselines(levels, views)
        )
    density = config.resolved_density()
    base = len(out)
    for j in range(config.n_candidates):
        rng = derived_rng(config.seed, "candidate", base + j)
        shape = views if config.mode == "vector" else (levels, views)
        out.append((f"random {j:02d}", random_pattern(rng, shape, density)))
    return out


def run_search(train_instances: Sequence[Instance], val_instances: Sequence[Instance],
               fusion_config: FusionConfig, config: SearchConfig,
               train_config: TrainConfig, levels: int = 5, views: int = 24) -> SearchResult:
    """Train and score every candidate; rank by validation MAE.

    Ties break toward fewer views, then lexicographic serialization, so the
    ranking is a total order and reruns reproduce it exactly.
    """
    if not train_instances or not val_instances:
        raise ConfigError("search needs non-empty train and val splits")
    candidates = candidate_list(config, levels, views)
    epochs = (
        config.epochs_per_candidate
        if config.epochs_per_candidate is not None
        else budgeted_epochs(config.mode, levels=levels)
    )

    def score(item: tuple[int, tuple[str, Selection]]) -> CandidateResult:
        index, (name, sel) = item
        seed = derived_seed(config.seed, "train", index)
        tc = replace(train_config, seed=seed, epochs=epochs, early_stopping=None)
        result = train(train_instances, None, sel, fusion_config, tc)
        report = evaluate(result.params, val_instances, sel)
        log.info("candidate %-20s views %3d val MAE %.6f", name, sel.views, report.mae)
        return CandidateResult(
            name=name,
            selection=sel,
            views=sel.views,
            val_mae=report.mae,
            val_rmse=report.rmse,
            epochs=epochs,
            seed=seed,
        )

    items = list(enumerate(candidates))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(score, items))
    else:
        rows = [score(item) for item in items]
    rows.sort(key=lambda r: (r.val_mae, r.views, serialize(r.selection)))
    return SearchResult(rows=rows)


def format_table(result: SearchResult) -> str:
    lines = [
        f"{'strategy':<22} {'views':>5} {'val MAE':>10} {'val RMSE':>10} {'epochs':>6}",
        "-" * 58,
    ]
    for row in result.rows:
        lines.append(
            f"{row.name:<22} {row.views:>5d} {row.val_mae:>10.6f} "
            f"{row.val_rmse:>10.6f} {row.epochs:>6d}"
        )
    return "\n".join(lines)


def save_results(result: SearchResult, outdir) -> tuple[str, str]:
    os.makedirs(outdir, exist_ok=True)
    table_path = os.path.join(str(outdir), "search_table.txt")
    best_path = os.path.join(str(outdir), "best_selection.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(format_table(result) + "\n")
    save_selection(result.best.selection, best_path)
    return table_path, best_path
