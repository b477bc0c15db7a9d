"""Optimization loop and checkpointing.

Each training instance draws an independent random rotation of the selection
per epoch pass, so the model never sees a fixed view-to-token assignment.
Fusion trunk and regression head run at separate learning rates under one
cosine schedule with a linear warm-up epoch. The optimizer is a cautious
AdamW: coordinates whose Adam update disagrees in sign with the current
gradient are zeroed and the surviving ones rescaled; decoupled weight decay
is applied unmasked.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .fusion import FusionConfig, FusionParams, forward, init_params
from .selection import Selection, SelectionMatrix, SelectionVector, apply_selection
from .store import Instance
from .util import derived_rng, get_logger

log = get_logger("training")

# Recorded verbatim in logs and checkpoints so runs are auditable.
UPDATE_RULE = (
    "m=b1*m+(1-b1)*g; v=b2*v+(1-b2)*g^2; u=mhat/(sqrt(vhat)+eps); "
    "phi=1[u*g>0]; u_masked=u*phi*numel/max(sum(phi),1); "
    "theta -= lr*u_masked + lr*wd*theta"
)

LOSSES = ("l1", "l2")
TARGETS = ("age_days", "leaf_count")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr_fusion: float = 4.2e-5
    lr_head: float = 7.5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 1
    loss: str = "l1"
    seed: int = 0
    early_stopping: int | None = None
    include_identity_rotation: bool = True
    target: str = "age_days"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for name in ("lr_fusion", "lr_head"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= warmup < epochs, "
                f"got {self.warmup_epochs} vs {self.epochs}"
            )
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.early_stopping is not None and self.early_stopping < 1:
            raise ConfigError("early_stopping patience must be >= 1")


class OptimizerState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, params: Sequence[Parameter]):
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0


def cadamw_step(params: Sequence[Parameter], state: OptimizerState,
                lr_by_group: dict[str, float], config: TrainConfig) -> None:
    """One cautious-AdamW update over all parameters.

    With every coordinate's update agreeing in sign with its gradient the
    mask is all ones and the rescale factor is exactly 1, reducing to plain
    AdamW. Disagreeing coordinates receive only the decay term.
    """
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        if g is None:
            raise ValidationError(f"missing gradient for parameter {p.name}")
        m = state.m[p.name]
        v = state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        u = (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        mask = (u * g) > 0
        kept = int(mask.sum())
        u = u * mask * (u.size / max(kept, 1))
        lr = lr_by_group[p.group]
        p.data -= lr * u + lr * config.weight_decay * p.data


def cosine_lr(step: int, steps_per_epoch: int, config: TrainConfig, base_lr: float) -> float:
    """Linear warm-up over the first epoch, cosine decay to 0 afterwards."""
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(total - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _instance_loss(pred: Tensor, label: float, kind: str) -> Tensor:
    diff = ad.sub(pred, float(label))
    if kind == "l1":
        return ad.absolute(diff)
    return ad.mul(diff, diff)


def _check_mode(instances: Sequence[Instance], sel: Selection) -> None:
    ndim = np.asarray(instances[0].features).ndim
    if isinstance(sel, SelectionVector) and ndim != 2:
        raise ConfigError("vector selection needs (views, dim) instances")
    if isinstance(sel, SelectionMatrix) and ndim != 3:
        raise ConfigError("matrix selection needs (levels, views, dim) instances")


@dataclass
class TrainResult:
    params: FusionParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    update_rule: str = UPDATE_RULE


def train(train_instances: Sequence[Instance], val_instances: Sequence[Instance] | None,
          sel: Selection, fusion_config: FusionConfig, config: TrainConfig) -> TrainResult:
    """Full training run; reproducible to the bit under a fixed seed.

    val_instances may be None to skip per-epoch evaluation (and with it early
    stopping); the history then records train loss and learning rates only.
    """
    from .inference import evaluate  # late import, inference also uses fusion

    if not train_instances:
        raise ConfigError("empty train split")
    _check_mode(train_instances, sel)
    n = len(train_instances)
    v = sel.n_views
    steps_per_epoch = math.ceil(n / config.batch_size)
    params = init_params(derived_rng(config.seed, "init"), fusion_config)
    state = OptimizerState(params.params)
    result = TrainResult(params=params)
    log.info("update rule: %s", UPDATE_RULE)

    best_mae = math.inf
    best_epoch = None
    best_snapshot = None
    step = 0
    for epoch in range(config.epochs):
        shuffle_rng = derived_rng(config.seed, "shuffle", epoch)
        rot_rng = derived_rng(config.seed, "rotate", epoch)
        drop_rng = derived_rng(config.seed, "dropout", epoch)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        lr_f = lr_h = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            with ad.Tape():
                total = None
                for idx in batch:
                    inst = train_instances[idx]
                    low = 0 if config.include_identity_rotation else 1
                    k = int(rot_rng.integers(low, v))
                    tokens = apply_selection(inst.features, sel, k)
                    try:
                        pred = forward(params, tokens, train=True, rng=drop_rng)
                    except NumericError as e:
                        raise NumericError(
                            f"diverged at epoch {epoch + 1} step {step}: {e}"
                        ) from e
                    term = _instance_loss(pred, inst.label, config.loss)
                    total = term if total is None else ad.add(total, term)
                loss = ad.scale(total, 1.0 / len(batch))
                ad.backward(loss)
            loss_sum += float(loss.data) * len(batch)
            lr_f = cosine_lr(step, steps_per_epoch, config, config.lr_fusion)
            lr_h = cosine_lr(step, steps_per_epoch, config, config.lr_head)
            cadamw_step(params.params, state, {"fusion": lr_f, "head": lr_h}, config)
            params.zero_grads()
            step += 1
        row = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / n,
            "val_mae": None,
            "val_rmse": None,
            "lr_fusion": lr_f,
            "lr_head": lr_h,
        }
        if val_instances:
            report = evaluate(params, val_instances, sel)
            row["val_mae"] = report.mae
            row["val_rmse"] = report.rmse
            if report.mae < best_mae:
                best_mae = report.mae
                best_epoch = epoch
                if config.early_stopping is not None:
                    best_snapshot = params.snapshot()
        result.history.append(row)
        log.info(
            "epoch %d: train_loss %.6f val_mae %s lr_head %.3g",
            row["epoch"], row["train_loss"],
            "-" if row["val_mae"] is None else f"{row['val_mae']:.6f}", lr_h,
        )
        if (
            config.early_stopping is not None
            and best_epoch is not None
            and epoch - best_epoch >= config.early_stopping
        ):
            result.stopped_early = True
            break
    if best_snapshot is not None:
        params.restore(best_snapshot)
    result.best_epoch = None if best_epoch is None else best_epoch + 1
    return result


def write_history(history: Sequence[dict], path) -> None:
    """Line-delimited JSON records, one per epoch."""
    with open(path, "w", encoding="utf-8") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")


CHECKPOINT_MAGIC = b"VSCK1"
_CHECKPOINT_LEN = struct.Struct("<I")


def save_checkpoint(params: FusionParams, path, extra: dict | None = None) -> None:
    """Header (config echo + tensor manifest) then float32 LE payload."""
    header = {
        "format_version": 1,
        "fusion_config": params.config.to_dict(),
        "update_rule": UPDATE_RULE,
        "tensors": [
            {"name": p.name, "group": p.group, "shape": list(p.data.shape)}
            for p in params.params
        ],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_CHECKPOINT_LEN.pack(len(blob)))
        f.write(blob)
        for p in params.params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[FusionParams, dict]:
    """Rebuild FusionParams bit-exactly; returns (params, header)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    (blob_len,) = _CHECKPOINT_LEN.unpack_from(raw, offset)
    offset += _CHECKPOINT_LEN.size
    try:
        header = json.loads(raw[offset : offset + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header: {e}") from e
    offset += blob_len
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")
    config = FusionConfig.from_dict(header["fusion_config"])
    params = []
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated checkpoint payload")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params.append(Parameter(spec["name"], spec["group"], np.array(data, dtype=np.float32)))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return FusionParams(config, params), header


def budgeted_epochs(mode: str, levels: int = 5, vector_epochs: int = 15) -> int:
    """Equal forward-pass budget: matrix instances are one per sample where
    vector instances are one per (sample, level), so matrix mode trains
    levels-times more epochs (75 for the default 5-level geometry)."""
    if mode == "vector":
        return vector_epochs
    if mode == "matrix":
        return vector_epochs * levels
    raise ConfigError(f"unknown mode {mode!r}")


def fit_config(base: TrainConfig, **overrides) -> TrainConfig:
    return replace(base, **overrides)
