"""Forecaster-aware gating.

Routing weights come from cross-attention between channel embeddings
(queries, one per channel of each series in the batch) and expert signature
embeddings (keys/values, one per expert). A post-norm transformer block
mixes the two, and a final linear head plus softmax yields one simplex over
experts per channel. Signatures enter as constants, so the gate adapts to
them without pushing gradients into the signature registry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class GateConfig:
    embed_dim: int = 64
    heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim < 1 or self.heads < 1:
            raise ConfigError(f"embed_dim and heads must be positive, got {self.embed_dim}, {self.heads}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class GateParams:
    """All trainable gate tensors for a fixed (lookback, horizon, K)."""

    def __init__(self, lookback: int, horizon: int, n_experts: int,
                 config: GateConfig, rng: np.random.Generator):
        if n_experts < 1:
            raise ConfigError(f"gate needs at least one expert, got {n_experts}")
        self.config = config
        self.lookback = lookback
        self.horizon = horizon
        self.n_experts = n_experts
        d = config.embed_dim
        ffn = 4 * d

        def weight(shape):
            return nc.parameter(rng.normal(0.0, INIT_STD, size=shape))

        def bias(n):
            return nc.parameter(np.zeros(n))

        self.params: dict[str, Tensor] = {
            "w_in": weight((lookback, d)),
            "sig_w1": weight((lookback * horizon, ffn)),
            "sig_b1": bias(ffn),
            "sig_w2": weight((ffn, d)),
            "sig_b2": bias(d),
            "attn_wq": weight((d, d)),
            "attn_wk": weight((d, d)),
            "attn_wv": weight((d, d)),
            "attn_wo": weight((d, d)),
            "ffn_w1": weight((d, ffn)),
            "ffn_b1": bias(ffn),
            "ffn_w2": weight((ffn, d)),
            "ffn_b2": bias(d),
            "ln1_gain": nc.parameter(np.ones(d)),
            "ln1_bias": bias(d),
            "ln2_gain": nc.parameter(np.ones(d)),
            "ln2_bias": bias(d),
            "w_out": weight((d, n_experts)),
        }

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())


def embed_channels(x: Tensor, gate: GateParams) -> Tensor:
    """Project per-channel lookback windows to queries, [B, C, L] -> [B, C, d]."""
    x = x if isinstance(x, Tensor) else nc.constant(x)
    if x.ndim != 3 or x.shape[2] != gate.lookback:
        raise ShapeError(f"expected [batch, channels, {gate.lookback}], got shape {x.shape}")
    b, c, L = x.shape
    rows = nc.reshape(x, (b * c, L))
    return nc.reshape(nc.matmul(rows, gate.params["w_in"]), (b, c, gate.config.embed_dim))


def embed_forecasters(signatures: np.ndarray, gate: GateParams) -> Tensor:
    """Embed expert signatures with a two-layer GELU MLP, [K, L, H] -> [K, d].

    Signatures are read as constants: the MLP weights train, the registry
    does not."""
    sig = np.asarray(signatures, dtype=np.float64)
    if sig.ndim != 3 or sig.shape[1:] != (gate.lookback, gate.horizon):
        raise ShapeError(
            f"expected signatures [K, {gate.lookback}, {gate.horizon}], got shape {sig.shape}"
        )
    if sig.shape[0] != gate.n_experts:
        raise ContractError(f"gate built for {gate.n_experts} experts, got {sig.shape[0]} signatures")
    p = gate.params
    flat = nc.constant(sig.reshape(sig.shape[0], -1))
    hidden = nc.gelu(nc.matmul(flat, p["sig_w1"]) + p["sig_b1"])
    return nc.matmul(hidden, p["sig_w2"]) + p["sig_b2"]


def attention_mix(queries: Tensor, keys: Tensor, gate: GateParams) -> Tensor:
    """Multi-head cross-attention context, [R, d] x [K, d] -> [R, d]."""
    p = gate.params
    d = gate.config.embed_dim
    heads = gate.config.heads
    width = d // heads
    scale = 1.0 / np.sqrt(width)
    q = nc.matmul(queries, p["attn_wq"])
    k = nc.matmul(keys, p["attn_wk"])
    v = nc.matmul(keys, p["attn_wv"])
    mixed = []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        qh = nc.slice_axis(q, 1, lo, hi)
        kh = nc.slice_axis(k, 1, lo, hi)
        vh = nc.slice_axis(v, 1, lo, hi)
        scores = nc.multiply(nc.matmul(qh, nc.transpose(kh)), scale)
        mixed.append(nc.matmul(nc.softmax(scores), vh))
    return nc.matmul(nc.concat(mixed, axis=1), p["attn_wo"])


def cross_attend(h_x: Tensor, h_f: Tensor, gate: GateParams,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm transformer block over channel queries and expert keys.

    [B, C, d] x [K, d] -> [B, C, d]. Dropout is applied to each sublayer
    output before its residual add, and only while training."""
    b, c, d = h_x.shape
    p = gate.params
    rate = gate.config.dropout
    rows = nc.reshape(h_x, (b * c, d))
    ctx = nc.dropout(attention_mix(rows, h_f, gate), rate, training, rng)
    attended = nc.layer_norm(rows + ctx, p["ln1_gain"], p["ln1_bias"])
    ff = nc.matmul(nc.gelu(nc.matmul(attended, p["ffn_w1"]) + p["ffn_b1"]), p["ffn_w2"]) + p["ffn_b2"]
    ff = nc.dropout(ff, rate, training, rng)
    out = nc.layer_norm(attended + ff, p["ln2_gain"], p["ln2_bias"])
    return nc.reshape(out, (b, c, d))


def route(x: Tensor, signatures: np.ndarray, gate: GateParams,
          training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Routing weights over experts, [B, C, L] -> [B, C, K] rows on the simplex."""
    h_x = embed_channels(x, gate)
    h_f = embed_forecasters(signatures, gate)
    h = cross_attend(h_x, h_f, gate, training, rng)
    b, c, d = h.shape
    logits = nc.matmul(nc.reshape(h, (b * c, d)), gate.params["w_out"])
    return nc.reshape(nc.softmax(logits), (b, c, gate.n_experts))
