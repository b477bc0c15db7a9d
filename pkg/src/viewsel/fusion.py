"""Token fusion model.

Selected per-view features become tokens: an optional input projection maps
the raw embedding width down to d_model, then the learned positional encoding
for the token's canonical index is added. Tokens run through a pre-norm
transformer encoder (LN -> multi-head self-attention -> residual, LN -> FFN
with PReLU -> residual), a final LN, mean pooling, and a two-layer PReLU MLP
that emits one scalar.

Dropout (one shared rate) hits the attention weights, each FFN output, and
the head's hidden layer; rate 0 or eval mode is the exact identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ShapeError, ValidationError
from .selection import SelectedTokenSet

INIT_STD = 0.02
PRELU_INIT = 0.25


@dataclass(frozen=True)
class FusionConfig:
    d_in: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int | None = None
    dropout: float = 0.0
    pe_count: int = 24
    use_projection: bool = True
    head_hidden: int = 64

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for field in ("d_in", "d_model", "n_layers", "n_heads", "d_ff", "pe_count", "head_hidden"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{field} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not self.use_projection and self.d_in != self.d_model:
            raise ConfigError(
                f"without a projection d_in must equal d_model, got {self.d_in} vs {self.d_model}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)


class FusionParams:
    """Ordered, named parameter set for one FusionConfig."""

    def __init__(self, config: FusionConfig, params: list[Parameter]):
        self.config = config
        self.params = params
        self._by_name = {p.name: p for p in params}
        if len(self._by_name) != len(params):
            raise ValidationError("duplicate parameter names")

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.params)

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def restore(self, snapshot: dict[str, np.ndarray]):
        for p in self.params:
            p.data[...] = snapshot[p.name]

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params)


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """N(0, std^2) with draws beyond two std redrawn until inside."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def init_params(rng: np.random.Generator, config: FusionConfig, dtype=np.float32) -> FusionParams:
    """Deterministic per rng state. Weights are truncated normal, biases 0,
    layer-norm affines identity, PReLU slopes 0.25."""
    dm, dff, hh = config.d_model, config.d_ff, config.head_hidden
    params: list[Parameter] = []

    def weight(name, group, shape):
        params.append(Parameter(name, group, _trunc_normal(rng, shape, INIT_STD, dtype), dtype))

    def const(name, group, shape, value):
        params.append(Parameter(name, group, np.full(shape, value), dtype))

    weight("pe_table", "fusion", (config.pe_count, dm))
    if config.use_projection:
        weight("proj.w", "fusion", (config.d_in, dm))
        const("proj.b", "fusion", (dm,), 0.0)
    for i in range(config.n_layers):
        pre = f"layer{i}."
        const(pre + "ln1.g", "fusion", (dm,), 1.0)
        const(pre + "ln1.b", "fusion", (dm,), 0.0)
        for mat in ("q", "k", "v", "o"):
            weight(pre + f"attn.w{mat}", "fusion", (dm, dm))
            const(pre + f"attn.b{mat}", "fusion", (dm,), 0.0)
        const(pre + "ln2.g", "fusion", (dm,), 1.0)
        const(pre + "ln2.b", "fusion", (dm,), 0.0)
        weight(pre + "ffn.w1", "fusion", (dm, dff))
        const(pre + "ffn.b1", "fusion", (dff,), 0.0)
        const(pre + "ffn.slope", "fusion", (dff,), PRELU_INIT)
        weight(pre + "ffn.w2", "fusion", (dff, dm))
        const(pre + "ffn.b2", "fusion", (dm,), 0.0)
    const("final_ln.g", "fusion", (dm,), 1.0)
    const("final_ln.b", "fusion", (dm,), 0.0)
    weight("head.w1", "head", (dm, hh))
    const("head.b1", "head", (hh,), 0.0)
    const("head.slope", "head", (hh,), PRELU_INIT)
    weight("head.w2", "head", (hh, 1))
    const("head.b2", "head", (1,), 0.0)
    return FusionParams(config, params)


def _attention(p: FusionParams, pre: str, h: Tensor, cfg: FusionConfig,
               train: bool, rng) -> Tensor:
    t_count = h.shape[0]
    heads, hd = cfg.n_heads, cfg.head_dim

    def split_heads(x):
        return ad.transpose(ad.reshape(x, (t_count, heads, hd)), (1, 0, 2))

    q = split_heads(ad.add(ad.matmul(h, p[pre + "attn.wq"].tensor), p[pre + "attn.bq"].tensor))
    k = split_heads(ad.add(ad.matmul(h, p[pre + "attn.wk"].tensor), p[pre + "attn.bk"].tensor))
    v = split_heads(ad.add(ad.matmul(h, p[pre + "attn.wv"].tensor), p[pre + "attn.bv"].tensor))
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
    weights = ad.softmax(logits, axis=-1)
    weights = ad.dropout(weights, cfg.dropout, train, rng)
    ctx = ad.matmul(weights, v)
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t_count, cfg.d_model))
    return ad.add(ad.matmul(merged, p[pre + "attn.wo"].tensor), p[pre + "attn.bo"].tensor)


def forward(p: FusionParams, tokens: SelectedTokenSet, train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Scalar prediction for one token set. Eval mode ignores rng entirely."""
    cfg = p.config
    if len(tokens) < 1:
        raise ValidationError("forward needs at least one token")
    pe_idx = np.asarray(tokens.pe_indices)
    if pe_idx.min() < 0 or pe_idx.max() >= cfg.pe_count:
        raise IndexError(
            f"pe_index out of range [0, {cfg.pe_count}): "
            f"{int(pe_idx.min())}..{int(pe_idx.max())}"
        )
    feats = np.asarray(tokens.features)
    if feats.ndim != 2 or feats.shape[1] != cfg.d_in:
        raise ShapeError(f"token features must be (T, {cfg.d_in}), got {feats.shape}")
    dtype = p["pe_table"].data.dtype
    x = Tensor(feats.astype(dtype, copy=False))
    if cfg.use_projection:
        x = ad.add(ad.matmul(x, p["proj.w"].tensor), p["proj.b"].tensor)
    x = ad.add(x, ad.take_rows(p["pe_table"].tensor, pe_idx))

    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = ad.layer_norm(x, p[pre + "ln1.g"].tensor, p[pre + "ln1.b"].tensor)
        x = ad.add(x, _attention(p, pre, h, cfg, train, rng))
        h = ad.layer_norm(x, p[pre + "ln2.g"].tensor, p[pre + "ln2.b"].tensor)
        f = ad.prelu(ad.add(ad.matmul(h, p[pre + "ffn.w1"].tensor), p[pre + "ffn.b1"].tensor),
                     p[pre + "ffn.slope"].tensor)
        f = ad.add(ad.matmul(f, p[pre + "ffn.w2"].tensor), p[pre + "ffn.b2"].tensor)
        f = ad.dropout(f, cfg.dropout, train, rng)
        x = ad.add(x, f)

    x = ad.layer_norm(x, p["final_ln.g"].tensor, p["final_ln.b"].tensor)
    pooled = ad.tmean(x, axis=0, keepdims=True)
    h = ad.prelu(ad.add(ad.matmul(pooled, p["head.w1"].tensor), p["head.b1"].tensor),
                 p["head.slope"].tensor)
    h = ad.dropout(h, cfg.dropout, train, rng)
    out = ad.add(ad.matmul(h, p["head.w2"].tensor), p["head.b2"].tensor)
    return ad.reshape(out, ())


def predict(p: FusionParams, tokens: SelectedTokenSet) -> float:
    """Eval-mode forward as a plain float; records nothing on the tape."""
    with ad.no_grad():
        return float(forward(p, tokens, train=False).data)


def leaf_tensors(p: FusionParams) -> list[Tensor]:
    return [param.tensor for param in p.params]


def group_names(params: Iterable[Parameter]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {"fusion": [], "head": []}
    for p in params:
        out[p.group].append(p.name)
    return out
