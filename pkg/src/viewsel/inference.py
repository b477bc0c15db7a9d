"""Rotation-averaged prediction and metric computation.

A single prediction runs the model once with one (selection, rotation) pair.
The averaged predictor takes the arithmetic mean over all V rotations,
accumulated in fixed k-ascending order so reports never depend on worker
count. Because token identities live in the canonical frame, the averaged
prediction is invariant to circular rotation of the input stack up to float
reassociation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .fusion import FusionParams, forward
from .selection import Selection, apply_selection
from .store import Instance, SampleKey


def predict_rotation(params: FusionParams, features: np.ndarray, sel: Selection,
                     k: int, level: int = 0) -> float:
    """Eval-mode prediction at one rotation; k is reduced mod V."""
    tokens = apply_selection(features, sel, k, level=level)
    with ad.no_grad():
        return float(forward(params, tokens, train=False).data)


def predict_averaged(params: FusionParams, features: np.ndarray, sel: Selection,
                     level: int = 0) -> float:
    """Mean prediction over all rotations k = 0..V-1, in that order."""
    total = 0.0
    v = sel.n_views
    for k in range(v):
        total += predict_rotation(params, features, sel, k, level=level)
    return total / v


@dataclass(frozen=True)
class InstanceRecord:
    key: SampleKey
    level: int | None
    prediction: float
    label: float


@dataclass
class EvalReport:
    mae: float
    rmse: float
    per_instance: list[InstanceRecord] = field(default_factory=list)
    group_breakdowns: dict[str, dict] = field(default_factory=dict)


def metric_pair(predictions: Sequence[float], labels: Sequence[float]) -> tuple[float, float]:
    """(MAE, RMSE) of raw predictions against labels."""
    preds = np.asarray(predictions, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.float64)
    if preds.shape != labs.shape or preds.size == 0:
        raise ConfigError(
            f"metric_pair needs matching non-empty arrays, got {preds.shape} vs {labs.shape}"
        )
    err = preds - labs
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def evaluate(params: FusionParams, instances: Sequence[Instance], sel: Selection,
             round_predictions: bool = False, workers: int = 1) -> EvalReport:
    """Rotation-averaged predictions over a split, with per-crop breakdowns."""
    if not instances:
        raise ConfigError("evaluate needs a non-empty split")

    def one(inst: Instance) -> float:
        level = inst.level if inst.level is not None else 0
        pred = predict_averaged(params, inst.features, sel, level=level)
        return float(np.rint(pred)) if round_predictions else pred

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(one, instances))
    else:
        preds = [one(inst) for inst in instances]

    labels = [inst.label for inst in instances]
    mae, rmse = metric_pair(preds, labels)
    records = [
        InstanceRecord(inst.key, inst.level, pred, inst.label)
        for inst, pred in zip(instances, preds)
    ]
    groups: dict[str, dict] = {}
    crops = sorted({inst.key.crop for inst in instances})
    for crop in crops:
        idx = [i for i, inst in enumerate(instances) if inst.key.crop == crop]
        gm, gr = metric_pair([preds[i] for i in idx], [labels[i] for i in idx])
        groups[crop] = {"mae": gm, "rmse": gr, "count": len(idx)}
    return EvalReport(mae=mae, rmse=rmse, per_instance=records, group_breakdowns=groups)


def mean_baseline(train_labels: Sequence[float], eval_labels: Sequence[float]) -> tuple[float, float]:
    """(MAE, RMSE) of always predicting the train-split mean label."""
    if len(train_labels) == 0 or len(eval_labels) == 0:
        raise ConfigError("mean_baseline needs non-empty label lists")
    center = float(np.mean(np.asarray(train_labels, dtype=np.float64)))
    preds = [center] * len(eval_labels)
    return metric_pair(preds, list(eval_labels))


def format_report(report: EvalReport, title: str = "evaluation") -> str:
    lines = [
        f"{title}",
        f"  instances: {len(report.per_instance)}",
        f"  MAE:  {report.mae:.6f}",
        f"  RMSE: {report.rmse:.6f}",
    ]
    for crop, stats in report.group_breakdowns.items():
        lines.append(
            f"  {crop}: MAE {stats['mae']:.6f}  RMSE {stats['rmse']:.6f}  n={stats['count']}"
        )
    return "\n".join(lines)


def report_records(report: EvalReport) -> list[dict]:
    """Per-instance rows ready for line-delimited JSON output."""
    return [
        {
            "crop": r.key.crop,
            "plant_id": r.key.plant_id,
            "day": r.key.day,
            "level": r.level,
            "prediction": r.prediction,
            "label": r.label,
        }
        for r in report.per_instance
    ]
