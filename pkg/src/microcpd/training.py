"""Dataset assembly, training loop, prediction and evaluation."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .autograd import Adam, no_grad
from .autograd import functional as F
from .exceptions import ConfigError, ShapeError, TrainingDivergedError
from .metrics import MetricsReport, evaluate_probabilities
from .network import MicroEnvNet, ModelConfig
from .voxel import GridDataset, read_grid_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-3
    batch_size: int = 150
    epochs: int = 8
    max_steps: Optional[int] = None
    val_every: int = 100
    stop_at_train_accuracy: Optional[float] = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ConfigError("batch_size, epochs and val_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def read_manifest(path) -> list:
    """Grid file paths, one per line; blank lines and ``#`` comments skipped; relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    return [ln if os.path.isabs(ln) else os.path.join(base, ln) for ln in lines if ln and not ln.startswith("#")]


def build_dataset(manifest) -> GridDataset:
    """Concatenate the grid files listed in ``manifest`` (a path list or a manifest file)."""
    paths = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    if not paths:
        raise ValueError("manifest lists no grid files")
    dataset = GridDataset.concatenate([read_grid_dataset(p) for p in paths])
    log.info("dataset: %d samples, class histogram %s", len(dataset), dataset.class_histogram().tolist())
    return dataset


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class HistoryRow:
    step: int
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float = math.nan


@dataclass
class TrainResult:
    model: MicroEnvNet
    history: list
    best_state: dict
    best_step: int
    best_val_acc: float


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    return math.sqrt(total)


def _check_grids(values, cfg: ModelConfig):
    s = cfg.input_size
    expected = (cfg.in_channels, s, s, s)
    if values.ndim != 5 or values.shape[1:] != expected:
        raise ShapeError(f"grids must have shape (n, {', '.join(map(str, expected))}), got {values.shape}")


def train(cfg: TrainConfig, train_set: GridDataset, val_set: Optional[GridDataset] = None,
          model: Optional[MicroEnvNet] = None, on_step: Optional[Callable] = None) -> TrainResult:
    """Mini-batch Adam on cross-entropy.

    Each row of the history carries the step's batch loss and batch accuracy
    (training mode), plus validation accuracy on validation steps. The state
    with the best validation accuracy is retained; without a validation set
    the final state is.
    """
    if not len(train_set):
        raise ValueError("empty training set")
    if val_set is not None and not len(val_set):
        raise ValueError("empty validation set")
    model = model if model is not None else MicroEnvNet(cfg.model)
    _check_grids(train_set.values, model.config)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n, bs = len(train_set), cfg.batch_size
    steps_per_epoch = -(-n // bs)
    total = cfg.epochs * steps_per_epoch if cfg.max_steps is None else cfg.max_steps
    history, best_state, best_step, best_val = [], None, 0, -1.0
    step = 0
    model.train()
    while step < total:
        epoch = step // steps_per_epoch
        order = epoch_order(n, cfg.seed, epoch)
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = np.sort(order[b * bs:(b + 1) * bs])
            x = train_set.values[idx].astype(model.dtype, copy=False)
            y = train_set.labels[idx]
            opt.zero_grad()
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            loss.backward()
            loss_value = float(loss.data)
            if not math.isfinite(loss_value) or not all(np.all(np.isfinite(p.grad)) for p in params if p.grad is not None):
                raise TrainingDivergedError(step + 1, cfg.lr, _grad_norm(params))
            opt.step()
            step += 1
            row = HistoryRow(step, epoch, loss_value, float(np.mean(logits.data.argmax(axis=1) == y)))
            if val_set is not None and (step % cfg.val_every == 0 or step == total):
                row.val_acc = evaluate(model, val_set, batch_size=bs).accuracy
                model.train()
                if row.val_acc > best_val:
                    best_val, best_step, best_state = row.val_acc, step, model.state_dict()
            history.append(row)
            if on_step is not None:
                on_step(row)
            if cfg.stop_at_train_accuracy is not None and row.train_acc >= cfg.stop_at_train_accuracy:
                total = step
                break
    if best_state is None:
        best_state, best_step = model.state_dict(), step
    model.eval()
    return TrainResult(model, history, best_state, best_step, best_val if best_val >= 0 else math.nan)


def predict_logits(model: MicroEnvNet, grids, batch_size: int = 150) -> np.ndarray:
    values = np.asarray(grids)
    _check_grids(values, model.config)
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for b in range(0, len(values), batch_size):
            out.append(model(values[b:b + batch_size].astype(model.dtype, copy=False)).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def predict(model: MicroEnvNet, grids, batch_size: int = 150) -> np.ndarray:
    """Eval-mode class probabilities, (n, 20) float64."""
    logits = predict_logits(model, grids, batch_size).astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(model: MicroEnvNet, dataset: GridDataset, batch_size: int = 150) -> MetricsReport:
    return evaluate_probabilities(predict(model, dataset.values, batch_size), dataset.labels)


def format_history(history: list, header: str = "") -> str:
    lines = [header + "step,epoch,train_loss,train_acc,val_acc"]
    for r in history:
        val = "" if math.isnan(r.val_acc) else repr(r.val_acc)
        lines.append(f"{r.step},{r.epoch},{r.train_loss!r},{r.train_acc!r},{val}")
    return "\n".join(lines) + "\n"
