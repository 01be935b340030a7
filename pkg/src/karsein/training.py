"""Objective, hand-derived gradients, and the epoch loop for KarSein models."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import auc, logloss, logloss_grad
from .model import KarseinModel, save_checkpoint
from .numeric import Adam, NonFiniteError

log = logging.getLogger(__name__)


def l1_reg(W) -> float:
    return float(np.abs(np.asarray(W, dtype=np.float64)).sum())


def l1_grad(W) -> np.ndarray:
    return np.sign(W)


def entropy_reg(W) -> float:
    """Entropy of |W| / ||W||_1; zero entries contribute nothing, a zero matrix scores 0."""
    a = np.abs(np.asarray(W, dtype=np.float64)).ravel()
    total = a.sum()
    if total == 0:
        return 0.0
    p = a / total
    p = p[p > 0]  # subnormal weights can underflow to p == 0
    return float(-(p * np.log(p)).sum())


def entropy_grad(W) -> np.ndarray:
    """d H / d w = -sign(w) (ln p + H) / ||W||_1, taken as 0 where w == 0."""
    W64 = np.asarray(W, dtype=np.float64)
    a = np.abs(W64)
    total = a.sum()
    g = np.zeros_like(W64)
    if total == 0:
        return g.astype(W.dtype)
    nz = (a / total) > 0
    p = a[nz] / total
    H = -(p * np.log(p)).sum()
    g[nz] = -np.sign(W64[nz]) * (np.log(p) + H) / total
    return g.astype(W.dtype)


def reg_loss(model, l1: float, l2: float) -> float:
    """Penalty over ``model.reg_params()``, each matrix scored on its own."""
    total = 0.0
    for P in model.reg_params():
        if l1:
            total += l1 * l1_reg(P.value)
        if l2:
            total += l2 * entropy_reg(P.value)
    return total


def total_loss(model, records, labels, l1: float = 0.0, l2: float = 0.0) -> float:
    if len(records) == 0:
        raise ValueError("total_loss of an empty batch")
    return logloss(model.forward(records).yhat, labels) + reg_loss(model, l1, l2)


def backward(model, records, labels, l1: float = 0.0, l2: float = 0.0,
             batch_index: Optional[int] = None) -> float:
    """Zero, then fill every parameter's grad with d total_loss; returns the loss."""
    model.zero_grad()
    cache = model.forward(records, keep=True)
    loss = logloss(cache.yhat, labels) + reg_loss(model, l1, l2)
    dy = logloss_grad(cache.yhat, labels).astype(model.dtype)
    model.backward(cache, dy)
    for P in model.reg_params():
        if l1:
            P.grad += (l1 * l1_grad(P.value)).astype(P.grad.dtype)
        if l2:
            P.grad += (l2 * entropy_grad(P.value)).astype(P.grad.dtype)
    model.mask_grads()
    for p in model.params():
        if not np.all(np.isfinite(p.grad)):
            where = "" if batch_index is None else f" (batch {batch_index})"
            raise NonFiniteError(f"non-finite gradient in {p.name}{where}")
    return loss


def evaluate(model, records, labels) -> tuple[float, float]:
    yhat = model.predict(records)
    return auc(labels, yhat), logloss(yhat, labels)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 20
    early_stop_patience: int = 2
    l1: float = 1e-4
    l2: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValueError("max_epochs must be >= 0 and early_stop_patience >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_auc: float = float("nan")
    best_val_logloss: float = float("nan")
    test_auc: float = float("nan")
    test_logloss: float = float("nan")
    stopping_reason: str = ""
    checkpoint: Optional[str] = None
    n_params: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_COLUMNS = ("epoch", "train_loss", "val_auc", "val_logloss")


def train(model, dataset, config: TrainConfig, out_dir=None,
          evaluate_test: bool = True) -> TrainReport:
    """Minibatch Adam on the regularized objective with early stopping on val AUC.

    ``dataset`` exposes ``records``, ``labels`` and the ``train``/``val``/``test``
    index arrays plus ``batches(split, batch_size, seed, epoch)``. The best-val
    parameters are restored into ``model`` before returning.
    """
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = timing_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_file = (out / "metrics.csv").open("w", newline="")
        timing_file = (out / "timings.csv").open("w", newline="")
        mw = csv.writer(metrics_file)
        tw = csv.writer(timing_file)
        mw.writerow(METRIC_COLUMNS)
        tw.writerow(("epoch", "seconds"))

    report = TrainReport(n_params=model.n_params())
    R, Y = dataset.records, dataset.labels
    val_auc, val_ll = evaluate(model, R[dataset.val], Y[dataset.val])
    report.best_val_auc, report.best_val_logloss = val_auc, val_ll
    best_state = model.state()
    opt = Adam(model.params(), lr=config.lr)
    stale = 0
    report.stopping_reason = "max_epochs"
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            losses = []
            try:
                for bi, idx in enumerate(dataset.batches("train", config.batch_size, config.seed, epoch)):
                    loss = backward(model, R[idx], Y[idx], config.l1, config.l2, batch_index=bi)
                    if not np.isfinite(loss):
                        raise NonFiniteError(f"loss became {loss} at epoch {epoch}, batch {bi}")
                    opt.step()
                    losses.append(loss)
                val_auc, val_ll = evaluate(model, R[dataset.val], Y[dataset.val])
            except (NonFiniteError, FloatingPointError) as exc:
                log.warning("diverged: %s; restoring epoch %d", exc, report.best_epoch)
                report.stopping_reason = f"diverged: {exc}"
                break
            seconds = time.perf_counter() - t0
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                   "val_auc": val_auc, "val_logloss": val_ll, "seconds": seconds}
            report.epochs.append(row)
            log.info("epoch %d loss %.5f val_auc %.5f val_logloss %.5f (%.1fs)",
                     epoch, row["train_loss"], val_auc, val_ll, seconds)
            if metrics_file is not None:
                mw.writerow([epoch, repr(row["train_loss"]), repr(val_auc), repr(val_ll)])
                tw.writerow([epoch, f"{seconds:.3f}"])
                metrics_file.flush()
            if val_auc > report.best_val_auc:
                report.best_val_auc, report.best_val_logloss = val_auc, val_ll
                report.best_epoch = epoch
                best_state = model.state()
                stale = 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    report.stopping_reason = f"early_stop (no val AUC gain for {stale} epochs)"
                    break
    finally:
        if metrics_file is not None:
            metrics_file.close()
            timing_file.close()

    model.load_state(best_state)
    if out is not None and isinstance(model, KarseinModel):
        report.checkpoint = str(save_checkpoint(model, out / "best"))
    if evaluate_test:
        report.test_auc, report.test_logloss = evaluate(model, R[dataset.test], Y[dataset.test])
    return report
