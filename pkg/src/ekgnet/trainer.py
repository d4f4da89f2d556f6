"""Optimization loop, evaluation and accuracy metrics."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .densenet import EKGNet
from .errors import ConfigError, EmptyInputError, ShapeError
from .hsi import TRAIN, VAL, PatchDataset
from .mapping import temperature_at
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    patience: int = 0  # 0 disables early stopping
    tau_start: float = 30.0
    tau_end: float = 1.0
    anneal_epochs: int = 10
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction; moments live in ``self.state``."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(0, [np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam update.  A ``None`` gradient counts as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0:
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)


# ----------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, num_classes: int, counts=None):
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None
                       else np.asarray(counts, dtype=np.int64))
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ShapeError("confusion matrix must be square with non-negative counts")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, true, pred) -> None:
        np.add.at(self.counts, (np.asarray(true), np.asarray(pred)), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    per_class: list  # recall per class, None where the class is absent
    absent_classes: list


def metrics(cm) -> Metrics:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    counts = counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyInputError("confusion matrix is empty")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    oa = diag.sum() / total
    present = rows > 0
    per_class = [float(d / r) if r > 0 else None for d, r in zip(diag, rows)]
    aa = float(np.mean(diag[present] / rows[present]))
    pe = float((rows * cols).sum() / (total * total))
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return Metrics(float(oa), aa, float(kappa), per_class, [int(i) for i in np.flatnonzero(~present)])


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    tau: float
    train_loss: float
    train_oa: float
    val_loss: float
    val_oa: float


LOG_COLUMNS = ("epoch", "tau", "train_loss", "train_oa", "val_loss", "val_oa")


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_val_oa: float
    best_state: dict
    stopped_early: bool = False

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for rec in self.log:
            row = asdict(rec)
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
        return buf.getvalue()


def _predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return logits.argmax(axis=1)


def evaluate_split(model: EKGNet, ds: PatchDataset, indices, batch_size: int = 64):
    """Return ``(ConfusionMatrix, mean loss)`` over ``indices`` in eval mode."""
    indices = np.asarray(indices)
    cm = ConfusionMatrix(ds.num_classes)
    if indices.size == 0:
        return cm, float("nan")
    was_training = model.training
    model.eval()
    loss_sum = 0.0
    with no_grad():
        for start in range(0, indices.size, batch_size):
            idx = indices[start:start + batch_size]
            logits = model(Tensor(ds.blocks(idx), dtype=model.cfg.np_dtype))
            y = ds.labels[idx]
            loss_sum += F.cross_entropy(logits, y).item() * idx.size
            cm.update(y, _predict(logits.data))
    model.train(was_training)
    return cm, loss_sum / indices.size


def evaluate(model: EKGNet, ds: PatchDataset, split="test", batch_size: int = 64) -> ConfusionMatrix:
    return evaluate_split(model, ds, ds.split_indices(split), batch_size)[0]


def set_epoch_temperature(model: EKGNet, epoch: int, cfg: TrainConfig) -> float:
    tau = temperature_at(epoch, cfg.tau_start, cfg.tau_end, cfg.anneal_epochs)
    model.set_temperature(tau)
    return tau


def train(model: EKGNet, ds: PatchDataset, cfg: TrainConfig, progress=None) -> TrainResult:
    train_idx = ds.split_indices(TRAIN)
    val_idx = ds.split_indices(VAL)
    if train_idx.size == 0:
        raise ConfigError("training split is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history: list[EpochRecord] = []
    best = (-1.0, -1, model.state_dict())
    since_best = 0
    stopped = False
    reset_tape()
    for epoch in range(cfg.epochs):
        tau = set_epoch_temperature(model, epoch, cfg)
        model.train()
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum, correct = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = ds.labels[idx]
            opt.zero_grad()
            logits = model(Tensor(ds.blocks(idx), dtype=model.cfg.np_dtype))
            loss = F.cross_entropy(logits, y)
            backward(loss)
            opt.step()
            loss_sum += loss.item() * idx.size
            correct += int((_predict(logits.data) == y).sum())
        if val_idx.size:
            val_cm, val_loss = evaluate_split(model, ds, val_idx, cfg.eval_batch_size)
            val_oa = metrics(val_cm).oa
        else:
            val_loss, val_oa = float("nan"), float("nan")
        rec = EpochRecord(epoch, tau, loss_sum / order.size, correct / order.size, val_loss, val_oa)
        history.append(rec)
        log.info("epoch %d tau=%.3f loss=%.4f train_oa=%.4f val_loss=%.4f val_oa=%.4f",
                 epoch, tau, rec.train_loss, rec.train_oa, val_loss, val_oa)
        if progress is not None:
            progress(rec)
        score = val_oa if val_idx.size else rec.train_oa
        if score > best[0]:
            best = (score, epoch, model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                stopped = True
                break
    return TrainResult(history, best[1], best[0], best[2], stopped)
