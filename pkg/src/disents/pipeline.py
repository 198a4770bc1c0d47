"""End-to-end model assembly, training, and evaluation.

A forecast pass stationarizes each window per channel, routes it across the
expert backbones, mixes their forecasts with the routing weights, and
de-stationarizes the mixture. A training step follows with the linear
weight approximation of every expert, the signature contrast term, one Adam
update, and finally the registry EMA update. Losses and metrics live on the
dataset-standardized scale; stationarization is internal to the model.

Seeding: every run owns two independent generator streams derived from its
seed, one consumed by parameter initialisation and one by training-time
shuffling and dropout, so model variants with the same seed stay aligned.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .backbones import Backbone, BackboneConfig, forecast_batch
from .datakit import WindowedData
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .gating import GateConfig, GateParams, route
from .lwa import EmaRegistry, LwaConfig, approximate, effective_top_k, select_top_k, signature_error
from .numcore import AdamState, Tensor, adam_step, backward, recording
from .objectives import LossConfig, mse_loss, similarity_constraint, total_loss


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def train_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


@dataclass(frozen=True)
class Stationarizer:
    """Per-instance, per-channel normalization over the lookback window."""

    eps_norm: float = 1e-5

    def normalize(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """[B, C, L] -> normalized array plus mu, sigma buffers of [B, C, 1]."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"expected [batch, channels, lookback], got shape {x.shape}")
        mu = x.mean(axis=2, keepdims=True)
        sigma = x.std(axis=2, keepdims=True)  # population
        return (x - mu) / (sigma + self.eps_norm), mu, sigma

    def denormalize(self, y: Tensor, mu: np.ndarray, sigma: np.ndarray) -> Tensor:
        """Exact inverse of normalize on the horizon side, gradient-transparent."""
        y = y if isinstance(y, Tensor) else nc.constant(y)
        return y * nc.constant(sigma + self.eps_norm) + nc.constant(mu)


@dataclass(frozen=True)
class ModelConfig:
    n_experts: int
    backbone: BackboneConfig
    gate: GateConfig = GateConfig()
    lwa: LwaConfig = LwaConfig()
    loss: LossConfig = LossConfig()
    eps_norm: float = 1e-5

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be positive, got {self.n_experts}")
        if self.eps_norm <= 0:
            raise ConfigError(f"eps_norm must be positive, got {self.eps_norm}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 0:
            raise ConfigError(f"patience must be non-negative, got {self.patience}")


class DisenTSModel:
    """Expert backbones, a routing gate, and the signature registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = init_rng(seed)
        self.config = config
        self.seed = seed
        bb = config.backbone
        self.backbones = [Backbone(bb, rng) for _ in range(config.n_experts)]
        self.gate = GateParams(bb.lookback, bb.horizon, config.n_experts, config.gate, rng)
        self.registry = EmaRegistry(config.n_experts, bb.lookback, bb.horizon,
                                    config.lwa.alpha, rng)
        self.stationarizer = Stationarizer(config.eps_norm)
        self.step_count = 0

    @property
    def n_experts(self) -> int:
        return self.config.n_experts

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for m, backbone in enumerate(self.backbones):
            out.extend((f"expert{m}.{name}", t) for name, t in backbone.parameters())
        out.extend((f"gate.{name}", t) for name, t in self.gate.parameters())
        return out

    def set_parameter(self, name: str, tensor: Tensor) -> None:
        scope, _, key = name.partition(".")
        if scope == "gate":
            if key not in self.gate.params:
                raise ContractError(f"unknown gate parameter {key!r}")
            self.gate.params[key] = tensor
        elif scope.startswith("expert"):
            idx = int(scope[len("expert"):])
            if key not in self.backbones[idx].params:
                raise ContractError(f"unknown backbone parameter {key!r}")
            self.backbones[idx].params[key] = tensor
        else:
            raise ContractError(f"unknown parameter scope in {name!r}")

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forecasts, [B, C, L] -> [B, C, H]."""
        return forward(self, x, training=False).y_hat.data


@dataclass
class ForwardResult:
    y_hat: Tensor  # [B, C, H] on the input scale
    y_hat_norm: Tensor  # [B, C, H] on the stationarized scale
    beta: Tensor  # [B, C, K]
    expert_outputs: list[Tensor]  # K tensors [B, C, H], stationarized scale
    x_norm: Tensor  # [B, C, L], stationarized input
    mu: np.ndarray
    sigma: np.ndarray


def forward(model: DisenTSModel, x: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    """One full forecast pass; expert outputs stay on the stationarized scale."""
    xn, mu, sigma = model.stationarizer.normalize(x)
    x_norm = nc.constant(xn)
    beta = route(x_norm, model.registry.gamma, model.gate, training, rng)
    outputs = [forecast_batch(bb, x_norm, training) for bb in model.backbones]
    mixed: Tensor | None = None
    for m, out in enumerate(outputs):
        term = nc.slice_axis(beta, 2, m, m + 1) * out
        mixed = term if mixed is None else mixed + term
    y_hat = model.stationarizer.denormalize(mixed, mu, sigma)
    return ForwardResult(y_hat=y_hat, y_hat_norm=mixed, beta=beta,
                         expert_outputs=outputs, x_norm=x_norm, mu=mu, sigma=sigma)


@dataclass
class StepReport:
    l_fc: float
    l_sc: float
    total: float
    epsilons: list[float]  # per-expert signature fit on the whole batch


def _require_finite(**quantities: float) -> None:
    for name, value in quantities.items():
        if not np.isfinite(value):
            raise NumericError(f"{name} is non-finite; aborting the run")


def train_step(model: DisenTSModel, x: np.ndarray, y: np.ndarray,
               opt: AdamState, rng: np.random.Generator) -> StepReport:
    """Forward, losses, backward, Adam, then the registry EMA update."""
    y = np.asarray(y, dtype=np.float64)
    with recording():
        fwd = forward(model, x, training=True, rng=rng)
        if fwd.y_hat.shape != y.shape:
            raise ShapeError(f"forecast shape {fwd.y_hat.shape} does not match targets {y.shape}")
        l_fc = mse_loss(fwd.y_hat, nc.constant(y))
        batch, channels, _ = fwd.beta.shape
        k = effective_top_k(model.config.lwa, batch * channels, model.config.backbone.lookback)
        signatures = []
        for m in range(model.n_experts):
            x_hat, f_hat = select_top_k(fwd.beta, fwd.x_norm, fwd.expert_outputs[m], m, k)
            signatures.append(approximate(x_hat, f_hat, model.config.lwa.rcond))
        l_sc = similarity_constraint(signatures, model.registry.gamma, model.config.loss)
        total = total_loss(l_fc, l_sc, model.config.loss.sc_weight)
        _require_finite(l_fc=l_fc.item(), l_sc=l_sc.item(), total=total.item())
        backward(total)
    params = [t for _, t in model.named_parameters()]
    adam_step(params, [p.grad for p in params], opt)
    rows = fwd.x_norm.data.reshape(batch * channels, -1)
    epsilons = [
        signature_error(rows, fwd.expert_outputs[m].data.reshape(rows.shape[0], -1),
                        signatures[m].data)
        for m in range(model.n_experts)
    ]
    for m in range(model.n_experts):
        model.registry.update(m, signatures[m].data)  # EMA last, after the optimizer step
    model.step_count += 1
    return StepReport(l_fc=l_fc.item(), l_sc=l_sc.item(), total=total.item(), epsilons=epsilons)


@dataclass
class Metrics:
    mse: float
    mae: float
    per_channel_mse: list[float]

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae, "per_channel_mse": self.per_channel_mse}


def _eval_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    raw = os.environ.get("DISENTS_THREADS", "").strip()
    return max(1, int(raw)) if raw else 1


def evaluate(model, x: np.ndarray, y: np.ndarray, batch_size: int = 256,
             threads: int | None = None) -> Metrics:
    """Forecast metrics of any `.predict` model over a windowed split.

    Batches may be sharded across threads (capped by DISENTS_THREADS); the
    reduction order is fixed by batch index, so results do not depend on
    the thread count."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[1] != y.shape[1]:
        raise ShapeError(f"window stacks disagree: inputs {x.shape}, targets {y.shape}")
    if x.shape[0] == 0:
        raise ConfigError("evaluate needs at least one window")
    starts = list(range(0, x.shape[0], batch_size))

    def shard(start: int):
        diff = model.predict(x[start:start + batch_size]) - y[start:start + batch_size]
        return (diff * diff).sum(axis=(0, 2)), np.abs(diff).sum()

    n_threads = _eval_threads(threads)
    if n_threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            partials = list(pool.map(shard, starts))
    else:
        partials = [shard(s) for s in starts]
    sq_by_channel = np.zeros(x.shape[1])
    abs_total = 0.0
    for sq, ab in partials:
        sq_by_channel += sq
        abs_total += ab
    count_per_channel = y.shape[0] * y.shape[2]
    per_channel = sq_by_channel / count_per_channel
    return Metrics(
        mse=float(sq_by_channel.sum() / y.size),
        mae=float(abs_total / y.size),
        per_channel_mse=[float(v) for v in per_channel],
    )


@dataclass
class EpochRecord:
    epoch: int
    train_lfc: float
    train_lsc: float
    val_mse: float
    epsilons: list[float]
    elapsed_s: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_lfc": self.train_lfc, "train_lsc": self.train_lsc,
                "val_mse": self.val_mse, "epsilons": self.epsilons, "elapsed_s": self.elapsed_s}


@dataclass
class FitResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_val_mse: float = float("inf")


class _EpochLoop:
    """Shared epoch driver: shuffling, early stopping, best-state restore."""

    def __init__(self, n_windows: int, config: TrainConfig, rng: np.random.Generator,
                 log_path: str | Path | None = None):
        if n_windows < 1:
            raise ConfigError("training needs at least one window")
        self.n = n_windows
        self.config = config
        self.rng = rng
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    def run(self, step_fn, val_fn, snapshot_fn, restore_fn) -> FitResult:
        result = FitResult()
        best_state = None
        bad_epochs = 0
        for epoch in range(self.config.epochs):
            t0 = time.perf_counter()
            order = self.rng.permutation(self.n)
            sums = None
            seen = 0
            for start in range(0, self.n, self.config.batch_size):
                idx = order[start:start + self.config.batch_size]
                report = step_fn(idx)
                weight = len(idx)
                vals = np.array([report.l_fc, report.l_sc, *report.epsilons])
                sums = vals * weight if sums is None else sums + vals * weight
                seen += weight
            avg = sums / seen
            val_mse = val_fn()
            record = EpochRecord(
                epoch=epoch, train_lfc=float(avg[0]), train_lsc=float(avg[1]),
                val_mse=val_mse, epsilons=[float(v) for v in avg[2:]],
                elapsed_s=time.perf_counter() - t0,
            )
            result.history.append(record)
            if self.log_path is not None:
                with open(self.log_path, "a") as fh:
                    fh.write(json.dumps(record.to_dict()) + "\n")
            if val_mse < result.best_val_mse:
                result.best_val_mse = val_mse
                best_state = snapshot_fn()
                bad_epochs = 0
            else:
                bad_epochs += 1
            if bad_epochs >= self.config.patience:
                break
        if best_state is not None:
            restore_fn(best_state)
        return result


def _snapshot_model(model: DisenTSModel) -> dict:
    return {
        "params": {name: t.data.copy() for name, t in model.named_parameters()},
        "gamma": model.registry.gamma.copy(),
        "initialized": list(model.registry.initialized),
    }


def _restore_model(model: DisenTSModel, state: dict) -> None:
    for name, t in model.named_parameters():
        t.data = state["params"][name].copy()
    model.registry.gamma = state["gamma"].copy()
    model.registry.initialized = list(state["initialized"])


def fit(model: DisenTSModel, data: WindowedData, config: TrainConfig,
        log_path: str | Path | None = None) -> FitResult:
    """Train with per-epoch shuffling and early stopping on validation MSE.

    The best-validation state (parameters and signature registry) is
    restored before returning. StepReport epsilons are averaged per epoch."""
    rng = train_rng(config.seed)
    params = [t for _, t in model.named_parameters()]
    opt = AdamState.for_params(params, lr=config.lr)
    loop = _EpochLoop(data.train_x.shape[0], config, rng, log_path)

    def step_fn(idx):
        return train_step(model, data.train_x[idx], data.train_y[idx], opt, rng)

    def val_fn():
        return evaluate(model, data.val_x, data.val_y).mse

    return loop.run(step_fn, val_fn,
                    lambda: _snapshot_model(model),
                    lambda state: _restore_model(model, state))


def mean_routing(model: DisenTSModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Average evaluation-mode routing weights over windows, [C, K]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ShapeError(f"expected a non-empty window stack, got shape {x.shape}")
    totals = np.zeros((x.shape[1], model.n_experts))
    for start in range(0, x.shape[0], batch_size):
        beta = forward(model, x[start:start + batch_size], training=False).beta
        totals += beta.data.sum(axis=0)
    return totals / x.shape[0]


class UnifiedBaseline:
    """One stationarization-wrapped backbone shared by all channels.

    No gate, no weight approximation, no contrast term: the reference point
    disentangled routing has to beat."""

    def __init__(self, config: BackboneConfig, seed: int = 0, eps_norm: float = 1e-5):
        self.config = config
        self.seed = seed
        self.backbone = Backbone(config, init_rng(seed))
        self.stationarizer = Stationarizer(eps_norm)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"backbone.{name}", t) for name, t in self.backbone.parameters()]

    def predict(self, x: np.ndarray) -> np.ndarray:
        xn, mu, sigma = self.stationarizer.normalize(x)
        out = forecast_batch(self.backbone, nc.constant(xn), training=False)
        return self.stationarizer.denormalize(out, mu, sigma).data


def unified_baseline(data: WindowedData, backbone: BackboneConfig, config: TrainConfig,
                     eps_norm: float = 1e-5) -> tuple[Metrics, UnifiedBaseline]:
    """Train the single-backbone baseline and report its test metrics."""
    model = UnifiedBaseline(backbone, config.seed, eps_norm)
    rng = train_rng(config.seed)
    params = [t for _, t in model.named_parameters()]
    opt = AdamState.for_params(params, lr=config.lr)
    loop = _EpochLoop(data.train_x.shape[0], config, rng)

    def step_fn(idx):
        x, y = data.train_x[idx], data.train_y[idx]
        with recording():
            xn, mu, sigma = model.stationarizer.normalize(x)
            out = forecast_batch(model.backbone, nc.constant(xn), training=True)
            y_hat = model.stationarizer.denormalize(out, mu, sigma)
            l_fc = mse_loss(y_hat, nc.constant(y))
            _require_finite(l_fc=l_fc.item())
            backward(l_fc)
        adam_step(params, [p.grad for p in params], opt)
        return StepReport(l_fc=l_fc.item(), l_sc=0.0, total=l_fc.item(), epsilons=[])

    def val_fn():
        return evaluate(model, data.val_x, data.val_y).mse

    def snapshot():
        return {name: t.data.copy() for name, t in model.named_parameters()}

    def restore(state):
        for name, t in model.named_parameters():
            t.data = state[name].copy()

    loop.run(step_fn, val_fn, snapshot, restore)
    return evaluate(model, data.test_x, data.test_y), model
