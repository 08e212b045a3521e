"""Training loop, optimizers, metrics, and evaluation.

The optimization objective is the squared-error loss summed over horizons and
nodes and averaged over the batch, which equals horizon * n_nodes * MSE. All
randomness (init, batch shuffling) flows from TrainConfig.seed, so a run is
bit-reproducible on one machine.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import WindowedDataset
from .errors import NumericError, ShapeError, ValidationError
from .graph import TrafficGraph, gcn_normalize
from .model import ArchConfig, ModelParams, forward, init_params
from .tensor import Tape, Tensor, mul, scale, sub, tensor_sum

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    early_stop_patience: int = 20
    seed: int = 0
    grad_clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.early_stop_patience < 1:
            raise ValidationError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValidationError(f"grad_clip_norm must be positive, got {self.grad_clip_norm}")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_mse: float
    val_mae: float
    wall_time_s: float


@dataclass
class TrainHistory:
    rows: list[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def best_epoch(self) -> EpochStats:
        return min(self.rows, key=lambda r: r.val_mse)

    FIELDS = ("epoch", "train_loss", "val_loss", "val_mse", "val_mae", "wall_time_s")

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for r in self.rows:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.val_mse), repr(r.val_mae), repr(r.wall_time_s)])


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared differences divided by the batch size (a Tensor scalar)."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return scale(tensor_sum(mul(diff, diff)), 1.0 / pred.shape[0])


def metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """Plain MSE and MAE over every element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"metric shapes differ: {pred.shape} vs {target.shape}")
    err = pred - target
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err)))}


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("params, grads, and optimizer state are misaligned")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"gradient/state shape mismatch for {p.name or f'param {i}'}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name or f'param {i}'}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float) -> None:
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name or f'param {i}'}")
        p.data = p.data - lr * g


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(g * g))
    total = float(np.sqrt(total))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= factor
    return total


# ---------------------------------------------------------------------------
# forward-only prediction and evaluation

def _as_propagation(graph) -> np.ndarray:
    if isinstance(graph, TrafficGraph):
        return gcn_normalize(graph)
    return np.asarray(graph, dtype=np.float64)


def predict(
    params: ModelParams,
    inputs: np.ndarray,
    graph,
    embeddings: np.ndarray | None,
    cfg: ArchConfig,
    batch_size: int = 256,
) -> np.ndarray:
    """Run the model over (S, M, n) inputs without recording a tape."""
    a_norm = Tensor(_as_propagation(graph))
    emb = None if embeddings is None else Tensor(np.asarray(embeddings, dtype=np.float64))
    chunks = []
    for start in range(0, inputs.shape[0], batch_size):
        xb = Tensor(inputs[start:start + batch_size])
        chunks.append(forward(xb, params, a_norm, emb, cfg).data)
    return np.concatenate(chunks, axis=0)


def persistence_baseline(inputs: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat each window's last observed row for every horizon."""
    last = inputs[:, -1:, :]
    return np.repeat(last, horizon, axis=1)


def evaluate(
    params: ModelParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    graph,
    embeddings: np.ndarray | None,
    cfg: ArchConfig,
    batch_size: int = 256,
) -> dict[str, float]:
    """Model metrics plus the persistence baseline's, all in the inputs' units."""
    if inputs.shape[0] == 0:
        raise ValidationError("evaluate needs at least one window")
    pred = predict(params, inputs, graph, embeddings, cfg, batch_size=batch_size)
    out = metrics(pred, targets)
    naive = metrics(persistence_baseline(inputs, cfg.horizon), targets)
    out["persistence_mse"] = naive["mse"]
    out["persistence_mae"] = naive["mae"]
    out["n_windows"] = float(inputs.shape[0])
    return out


# ---------------------------------------------------------------------------
# training

def train_loop(
    dataset: WindowedDataset,
    graph,
    embeddings: np.ndarray | None,
    arch: ArchConfig,
    cfg: TrainConfig,
) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch training with per-epoch validation and best-checkpoint keeping.

    Batches are drawn in a freshly shuffled order each epoch (seeded); the
    returned params are from the epoch with the lowest validation MSE, never a
    later one. Stops early when validation MSE has not improved for
    ``early_stop_patience`` epochs.
    """
    train_x, train_y = dataset.split_arrays("train")
    val_x, val_y = dataset.split_arrays("val")
    if train_x.shape[0] == 0 or val_x.shape[0] == 0:
        raise ValidationError(
            f"train/val splits must be non-empty, got {train_x.shape[0]}/{val_x.shape[0]} windows"
        )
    if dataset.input_steps != arch.input_steps or dataset.horizon != arch.horizon:
        raise ValidationError(
            f"dataset windows ({dataset.input_steps}, {dataset.horizon}) do not match the "
            f"architecture ({arch.input_steps}, {arch.horizon})"
        )
    a_norm = Tensor(_as_propagation(graph))
    emb = None if embeddings is None else Tensor(np.asarray(embeddings, dtype=np.float64))
    params = init_params(arch, seed=cfg.seed)
    named = params.named_parameters()
    tensors = [p for _, p in named]
    state = AdamState.init(tensors) if cfg.optimizer == "adam" else None
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_state: dict[str, np.ndarray] | None = None
    best_val = np.inf
    stale_epochs = 0
    n_train = train_x.shape[0]

    for epoch in range(1, cfg.epochs + 1):
        t_begin = time.perf_counter()
        order = rng.permutation(n_train)
        total_loss = 0.0
        for batch_no, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = Tensor(train_x[idx]), Tensor(train_y[idx])
            tape = Tape()
            with tape:
                pred = forward(xb, params, a_norm, emb, arch)
                loss = l2_loss(pred, yb)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {batch_no}")
            tape.backward(loss)
            grads = [p.grad for p in tensors]
            if cfg.grad_clip_norm is not None:
                clip_grad_norm(grads, cfg.grad_clip_norm)
            if cfg.optimizer == "adam":
                adam_step(tensors, grads, state, cfg.learning_rate)
            else:
                sgd_step(tensors, grads, cfg.learning_rate)
            params.zero_grads()
            total_loss += float(loss.data) * len(idx)
        train_loss = total_loss / n_train

        val_pred = predict(params, val_x, a_norm.data, emb.data if emb is not None else None,
                           arch, batch_size=max(cfg.batch_size, 256))
        val = metrics(val_pred, val_y)
        val_loss = val["mse"] * arch.horizon * dataset.n_nodes
        history.rows.append(EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_mse=val["mse"],
            val_mae=val["mae"],
            wall_time_s=time.perf_counter() - t_begin,
        ))
        if val["mse"] < best_val:
            best_val = val["mse"]
            best_state = params.copy_data()
            stale_epochs = 0
        else:
            stale_epochs += 1
        logger.info("epoch %d: train_loss=%.6f val_mse=%.6f val_mae=%.6f",
                    epoch, train_loss, val["mse"], val["mae"])
        if stale_epochs >= cfg.early_stop_patience:
            logger.info("early stop after %d epochs without val improvement", stale_epochs)
            break

    params.load_data(best_state)
    return params, history


def overfit_single_batch(
    x: np.ndarray,
    y: np.ndarray,
    graph,
    embeddings: np.ndarray | None,
    arch: ArchConfig,
    steps: int = 2000,
    lr: float = 1e-2,
    seed: int = 0,
    target_loss: float | None = None,
) -> list[float]:
    """Adam on one fixed batch; returns the loss trace (stops early at target_loss)."""
    a_norm = Tensor(_as_propagation(graph))
    emb = None if embeddings is None else Tensor(np.asarray(embeddings, dtype=np.float64))
    params = init_params(arch, seed=seed)
    tensors = [p for _, p in params.named_parameters()]
    state = AdamState.init(tensors)
    xb, yb = Tensor(np.asarray(x, dtype=np.float64)), Tensor(np.asarray(y, dtype=np.float64))
    trace = []
    for _ in range(steps):
        tape = Tape()
        with tape:
            loss = l2_loss(forward(xb, params, a_norm, emb, arch), yb)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at overfit step {len(trace)}")
        tape.backward(loss)
        adam_step(tensors, [p.grad for p in tensors], state, lr)
        params.zero_grads()
        trace.append(float(loss.data))
        if target_loss is not None and trace[-1] < target_loss:
            break
    return trace
