"""Linear weight approximation of expert behaviour.

Each training step distils every expert into a single linear map W: the
rows the gate routes most confidently to that expert are regressed against
the expert's forecasts for them, W = pinv(x_hat) @ f_hat (least squares,
no intercept). The pseudo-inverse of the inputs is a gradient barrier, so
the constraint losses built on W reach the expert only through its
forecasts. An exponential moving average of W per expert forms the
signature registry the gate conditions on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbones import Backbone, forecast_rows
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tensor

INIT_STD = 0.02  # registry warm-start noise, breaks routing symmetry


@dataclass(frozen=True)
class LwaConfig:
    top_k: int | None = None  # None: min(batch * channels, 2 * lookback)
    alpha: float = 0.9
    rcond: float = 1e-6

    def __post_init__(self):
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"top_k must be positive, got {self.top_k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.rcond <= 0.0:
            raise ConfigError(f"rcond must be positive, got {self.rcond}")


def effective_top_k(config: LwaConfig, pool: int, lookback: int) -> int:
    """Rows to regress on: the configured k capped by the pool, or the default."""
    if config.top_k is None:
        return min(pool, 2 * lookback)
    return min(config.top_k, pool)


class EmaRegistry:
    """Per-expert EMA of linear signatures, gamma[m] in R^{lookback x horizon}.

    Until an expert's first update its slot holds small seeded noise and is
    flagged uninitialised; the first update copies W verbatim, later ones
    blend gamma = alpha * gamma + (1 - alpha) * W.
    """

    def __init__(self, n_experts: int, lookback: int, horizon: int,
                 alpha: float, rng: np.random.Generator):
        if n_experts < 1:
            raise ConfigError(f"registry needs at least one expert, got {n_experts}")
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha = alpha
        self.gamma = rng.normal(0.0, INIT_STD, size=(n_experts, lookback, horizon))
        self.initialized = [False] * n_experts

    @property
    def n_experts(self) -> int:
        return self.gamma.shape[0]

    def update(self, expert: int, w: np.ndarray) -> None:
        """Fold one batch signature into the registry. W enters as a constant."""
        w = np.asarray(w, dtype=np.float64)
        if not 0 <= expert < self.n_experts:
            raise ContractError(f"expert index {expert} out of range for {self.n_experts}")
        if w.shape != self.gamma.shape[1:]:
            raise ShapeError(f"signature shape {w.shape} does not match {self.gamma.shape[1:]}")
        if self.initialized[expert]:
            self.gamma[expert] = self.alpha * self.gamma[expert] + (1.0 - self.alpha) * w
        else:
            self.gamma[expert] = w.copy()
            self.initialized[expert] = True


def select_top_k(beta: Tensor, x_norm: Tensor, y_hat: Tensor,
                 expert: int, k: int) -> tuple[Tensor, Tensor]:
    """Pick the k channel rows with the highest routing weight for `expert`.

    Rows are pooled across the whole batch ([B, C] flattened row-major) and
    ties broken by ascending (batch, channel) position. Returns x_hat as a
    constant [k, L] and f_hat as [k, H] with gradient linkage to the expert.
    """
    if beta.ndim != 3:
        raise ShapeError(f"beta must be [batch, channels, experts], got shape {beta.shape}")
    b, c, n_experts = beta.shape
    pool = b * c
    if not 0 <= expert < n_experts:
        raise ContractError(f"expert index {expert} out of range for {n_experts}")
    if not 1 <= k <= pool:
        raise ContractError(f"top-k of {k} from a pool of {pool} rows")
    if x_norm.shape[:2] != (b, c) or y_hat.shape[:2] != (b, c):
        raise ShapeError(
            f"beta {beta.shape}, inputs {x_norm.shape}, forecasts {y_hat.shape} disagree on batch/channels"
        )
    scores = beta.data[:, :, expert].reshape(pool)
    order = np.argsort(-scores, kind="stable")[:k]
    x_rows = nc.constant(x_norm.data.reshape(pool, x_norm.shape[2])[order])
    f_rows = nc.gather_rows(nc.reshape(y_hat, (pool, y_hat.shape[2])), order)
    return x_rows, f_rows


def approximate(x_hat: Tensor, f_hat: Tensor, rcond: float = 1e-6) -> Tensor:
    """Least-squares linear signature W = pinv(x_hat) @ f_hat, [L, H].

    Gradients flow only through f_hat; the pseudo-inverse is constant."""
    if x_hat.ndim != 2 or f_hat.ndim != 2 or x_hat.shape[0] != f_hat.shape[0]:
        raise ShapeError(f"row mismatch between inputs {x_hat.shape} and forecasts {f_hat.shape}")
    return nc.matmul(nc.pinv(x_hat, rcond), f_hat)


def signature_error(x: np.ndarray, outputs: np.ndarray, w: np.ndarray) -> float:
    """Mean squared gap between expert forecasts and their linear image x @ W."""
    x = np.asarray(x, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    diff = outputs - x @ np.asarray(w, dtype=np.float64)
    return float(np.mean(diff * diff))


def approximation_error(backbone: Backbone, x: np.ndarray, w: np.ndarray) -> float:
    """How faithfully W mirrors the backbone on the given rows (eval mode)."""
    with nc.no_recording():
        pred = forecast_rows(backbone, nc.constant(x), training=False)
    return signature_error(x, pred.data, w)
