"""Adam, early stopping, the training loop, and horizon metrics."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .data import Scaler, WindowSet
from .layers import Module, encode_checkpoint
from .models import GraphContext
from .tensor import Tensor

log = logging.getLogger(__name__)

MAPE_FLOOR = 1e-3
DEFAULT_HORIZONS = (3, 6, 12)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamState:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(state: AdamState, grads: dict[str, np.ndarray | None] | None = None) -> None:
    """One bias-corrected Adam update in place.  Missing grads count as zero."""
    if grads is None:
        grads = {k: p.grad for k, p in state.params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def state_hash(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint(state)).hexdigest()


class EarlyStopper:
    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best_val = math.inf
        self.best_epoch = 0
        self.epochs_since_improve = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self._epoch = 0

    @property
    def best_hash(self) -> str | None:
        return None if self.best_state is None else state_hash(self.best_state)


def early_stop_update(es: EarlyStopper, val_loss: float, model: Module | None = None) -> str:
    """Return ``"stop"`` once ``patience`` consecutive epochs fail to strictly improve."""
    es._epoch += 1
    if val_loss < es.best_val:
        es.best_val = val_loss
        es.best_epoch = es._epoch
        es.epochs_since_improve = 0
        if model is not None:
            es.best_state = model.state_dict()
    else:
        es.epochs_since_improve += 1
    return "stop" if es.epochs_since_improve >= es.patience else "continue"


# ---------------------------------------------------------------------------
# prediction and metrics
# ---------------------------------------------------------------------------


class PersistenceModel(Module):
    """Repeats the last observed (normalized) input value for every horizon."""

    kind = "persistence"

    def __init__(self, horizon: int):
        self.horizon = horizon

    def __call__(self, x: Tensor, times, ctx) -> Tensor:
        last = x.data[:, -1, :, 0]
        return Tensor(np.repeat(last[:, None, :], self.horizon, axis=1))


def predict(model, windows: WindowSet, scaler: Scaler, ctx: GraphContext | None,
            batch_size: int = 64) -> np.ndarray:
    """Forecasts for every window, inverse-scaled to original units, ``[N, Q, n]``."""
    out = []
    with T.no_grad():
        for b in windows.batches(batch_size):
            pred = model(Tensor(scaler.transform(b.x)), b.times, ctx)
            out.append(scaler.inverse(pred.data))
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float | None
    mape_included: int
    mape_excluded: int


@dataclass(frozen=True)
class MetricsReport:
    horizons: dict[int, HorizonMetrics]
    step_mode: str = "average"

    def __getitem__(self, h: int) -> HorizonMetrics:
        return self.horizons[h]

    @property
    def mape_enabled(self) -> bool:
        return any(m.mape is not None for m in self.horizons.values())


def compute_metrics(pred: np.ndarray, target: np.ndarray, horizons=DEFAULT_HORIZONS,
                    mape_enabled: bool = True, step_mode: str = "average") -> MetricsReport:
    """MAE / RMSE / MAPE (percent) over samples, nodes and steps 1..H (or step H only)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} must both be [N, Q, n]")
    if pred.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if step_mode not in ("average", "last"):
        raise ValueError(f"step_mode must be 'average' or 'last', got {step_mode!r}")
    out = {}
    for h in horizons:
        if not 1 <= h <= pred.shape[1]:
            raise ValueError(f"horizon {h} outside 1..{pred.shape[1]}")
        sl = slice(0, h) if step_mode == "average" else slice(h - 1, h)
        p, y = pred[:, sl], target[:, sl]
        err = p - y
        mae = float(np.mean(np.abs(err)))
        rmse = float(np.sqrt(np.mean(err * err)))
        mape, inc, exc = None, 0, 0
        if mape_enabled:
            keep = np.abs(y) >= MAPE_FLOOR
            inc = int(keep.sum())
            exc = int(keep.size - inc)
            mape = float(np.mean(np.abs(err[keep]) / np.abs(y[keep])) * 100.0) if inc else float("nan")
        out[h] = HorizonMetrics(mae, rmse, mape, inc, exc)
    return MetricsReport(out, step_mode)


def evaluate(model, windows: WindowSet, scaler: Scaler, ctx: GraphContext | None,
             horizons=DEFAULT_HORIZONS, mape_enabled: bool = True,
             step_mode: str = "average") -> MetricsReport:
    if len(windows) == 0:
        raise ValueError("empty test set")
    pred = predict(model, windows, scaler, ctx)
    return compute_metrics(pred, windows.y, horizons, mape_enabled, step_mode)


def persistence_baseline(windows: WindowSet, horizons=DEFAULT_HORIZONS, mape_enabled: bool = True,
                         step_mode: str = "average") -> MetricsReport:
    if len(windows) == 0:
        raise ValueError("empty test set")
    last = windows.x[:, -1, :, 0]
    pred = np.repeat(last[:, None, :], windows.Q, axis=1)
    return compute_metrics(pred, windows.y, horizons, mape_enabled, step_mode)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}; "
                         f"last finite epoch was {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


@dataclass
class TrainSettings:
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 10
    max_epochs: int = 200
    loss: str = "mae"
    clip_norm: float = 5.0           # <= 0 disables clipping
    time_budget_s: float | None = None   # no epoch starts that would likely end past this


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


@dataclass
class TrainingLog:
    initial_train_loss: float
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stopped_early: bool = False
    best_hash: str | None = None

    def lines(self) -> list[str]:
        out = [f"epoch 0 train_loss={self.initial_train_loss!r}"]
        out += [f"epoch {e.epoch} train_loss={e.train_loss!r} val_mae={e.val_mae!r} "
                f"seconds={e.seconds:.3f}" for e in self.epochs]
        out.append(f"best_epoch {self.best_epoch} best_val={self.best_val!r} "
                   f"stopped_early={self.stopped_early}")
        return out


LOSSES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "mae": lambda p, y: T.mean(T.abs(p - y)),
    "mse": lambda p, y: T.mean((p - y) * (p - y)),
}


def _dataset_loss(model, windows: WindowSet, scaler: Scaler, ctx, loss_fn, batch_size: int) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for b in windows.batches(batch_size):
            pred = model(Tensor(scaler.transform(b.x)), b.times, ctx)
            total += loss_fn(pred, Tensor(scaler.transform(b.y))).item() * len(b.index)
            count += len(b.index)
    return total / count


def train_model(model: Module, train: WindowSet, val: WindowSet, scaler: Scaler,
                ctx: GraphContext | None, settings: TrainSettings | None = None,
                seed: int = 1) -> TrainingLog:
    """Mini-batch Adam on the normalized loss; restores the best-validation parameters."""
    settings = settings or TrainSettings()
    try:
        loss_fn = LOSSES[settings.loss]
    except KeyError:
        raise ValueError(f"unknown loss {settings.loss!r}; choose from {sorted(LOSSES)}") from None
    rng = np.random.default_rng([seed, 7])
    params = model.parameters()
    adam = AdamState(params, settings.lr)
    stopper = EarlyStopper(settings.patience)
    log_ = TrainingLog(_dataset_loss(model, train, scaler, ctx, loss_fn, settings.batch_size))
    started = time.perf_counter()

    for epoch in range(1, settings.max_epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for b in train.batches(settings.batch_size, rng):
            model.zero_grad()
            with T.Tape():
                pred = model(Tensor(scaler.transform(b.x)), b.times, ctx)
                loss = loss_fn(pred, Tensor(scaler.transform(b.y)))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, epoch - 1)
                T.backward(loss)
            if settings.clip_norm > 0:
                clip_grad_norm(params.values(), settings.clip_norm)
            adam_step(adam)
            total += value * len(b.index)
            count += len(b.index)
        val_mae = evaluate(model, val, scaler, ctx, horizons=(val.Q,), mape_enabled=False)[val.Q].mae
        record = EpochRecord(epoch, total / count, val_mae, time.perf_counter() - t0)
        log_.epochs.append(record)
        log.info("epoch %d train_loss=%.5f val_mae=%.4f (%.1fs)", epoch, record.train_loss,
                 val_mae, record.seconds)
        if not math.isfinite(val_mae):
            raise TrainingDiverged(epoch, epoch - 1)
        if early_stop_update(stopper, val_mae, model) == "stop":
            log_.stopped_early = True
            break
        # stop before an epoch that would likely end past the budget
        longest = max(e.seconds for e in log_.epochs)
        if settings.time_budget_s is not None and \
                time.perf_counter() - started + longest > settings.time_budget_s:
            log.info("time budget exhausted after epoch %d", epoch)
            break

    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    log_.best_epoch = stopper.best_epoch
    log_.best_val = stopper.best_val
    log_.best_hash = stopper.best_hash
    return log_
