"""Forward-pass cost accounting and wall-clock timing.

The byte and MAC figures are analytic functions of the model configuration
and the token count, identical on every machine; only wall_time is measured.
Absolute device memory is out of reach here, so the accounting preserves the
comparative structure instead: more tokens always cost strictly more, and
the attention-logit term grows with the square of the token count. All
figures assume batch size 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .fusion import FusionConfig, forward, init_params
from .selection import SelectedTokenSet, SelectionMatrix, SelectionVector
from .util import derived_rng

BYTES_PER_VALUE = 4  # single precision


@dataclass
class CostReport:
    name: str
    tokens: int
    activation_bytes: int
    mac_estimate: int
    breakdown: dict[str, int] = field(default_factory=dict)
    wall_time_s: float | None = None


def _token_count(selection_or_tokens) -> int:
    if isinstance(selection_or_tokens, (int, np.integer)):
        return int(selection_or_tokens)
    if isinstance(selection_or_tokens, (SelectionVector, SelectionMatrix)):
        return selection_or_tokens.views
    raise ConfigError(f"cannot count tokens of {type(selection_or_tokens)!r}")


def activation_elements(config: FusionConfig, t: int) -> dict[str, int]:
    """Element counts of every intermediate tensor of one forward pass."""
    dm, dff, hh = config.d_model, config.d_ff, config.head_hidden
    heads, layers = config.n_heads, config.n_layers
    return {
        "embeddings": t * dm,
        "pre_norms": layers * 2 * t * dm + t * dm,
        "qkv": layers * 3 * t * dm,
        "attention_logits": layers * heads * t * t,
        "attention_weights": layers * heads * t * t,
        "attention_context": layers * t * dm,
        "attention_proj": layers * t * dm,
        "ffn_hidden": layers * 2 * t * dff,
        "ffn_out": layers * t * dm,
        "residuals": layers * 2 * t * dm,
        "pooled": dm,
        "head_hidden": 2 * hh,
        "output": 1,
    }


def mac_counts(config: FusionConfig, t: int) -> dict[str, int]:
    """Multiply-accumulate counts, matmuls only (norms and softmax ignored)."""
    dm, dff, hh = config.d_model, config.d_ff, config.head_hidden
    layers = config.n_layers
    out = {
        "projection": t * config.d_in * dm if config.use_projection else 0,
        "qkv_projections": layers * 3 * t * dm * dm,
        "attention_logits": layers * t * t * dm,
        "attention_context": layers * t * t * dm,
        "output_projection": layers * t * dm * dm,
        "ffn": layers * 2 * t * dm * dff,
        "head": dm * hh + hh,
    }
    return out


def account_forward(config: FusionConfig, selection_or_tokens, name: str = "") -> CostReport:
    """Deterministic cost report for one forward pass at batch size 1."""
    t = _token_count(selection_or_tokens)
    if t < 1:
        raise ConfigError("token count must be >= 1")
    elements = activation_elements(config, t)
    macs = mac_counts(config, t)
    return CostReport(
        name=name or f"T={t}",
        tokens=t,
        activation_bytes=BYTES_PER_VALUE * sum(elements.values()),
        mac_estimate=sum(macs.values()),
        breakdown=elements,
    )


def time_forward(config: FusionConfig, sel: SelectionVector | SelectionMatrix, seed: int = 0,
                 warmups: int = 5, repeats: int = 20) -> float:
    """Median eval-mode forward seconds over the repeats, after warm-up."""
    if warmups < 5 or repeats < 20:
        raise ConfigError("timing needs at least 5 warmups and 20 repeats")
    params = init_params(derived_rng(seed, "bench-params"), config)
    rng = derived_rng(seed, "bench-data")
    cols = np.nonzero(np.atleast_2d(sel.bits))
    levels, views = cols
    v = sel.n_views
    features = rng.standard_normal((sel.views, config.d_in)).astype(np.float32)
    pe = (levels * v + views) if np.atleast_2d(sel.bits).shape[0] > 1 else views
    tokens = SelectedTokenSet(
        features=features,
        pe_indices=pe,
        levels=levels,
        physical_views=views,
    )
    with ad.no_grad():
        for _ in range(warmups):
            forward(params, tokens, train=False)
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            forward(params, tokens, train=False)
            samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def format_cost_table(reports: list[CostReport]) -> str:
    lines = [
        "analytic forward-pass accounting (batch 1, float32); bytes and MACs",
        "are exact functions of config and token count, not device memory",
        f"{'strategy':<22} {'tokens':>6} {'act bytes':>12} {'MACs':>14} {'median s':>10}",
        "-" * 68,
    ]
    for r in reports:
        wt = "-" if r.wall_time_s is None else f"{r.wall_time_s:.6f}"
        lines.append(
            f"{r.name:<22} {r.tokens:>6d} {r.activation_bytes:>12d} "
            f"{r.mac_estimate:>14d} {wt:>10}"
        )
    return "\n".join(lines)
