"""Mini-batch SGD with Nesterov momentum driving the unified loss.

A run is fully determined by (seed, config, dataset): epoch shuffles come
from a counter-based stream keyed by (seed, epoch), the last partial
batch is kept, and parameter updates are in deterministic layer order.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import rng as streams
from .autograd import ShapeError
from .data import Dataset
from .losses import LossBreakdown, LossWeights, unified_loss
from .nn import Model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    shuffle: bool = True
    eval_every: int = 0  # epochs between test evaluations; 0 = never

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    ce: float
    affinity: float
    dispersion: float
    compactness: float
    total: float
    seconds: float
    test_accuracy: float | None = None


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "ce", "aff", "dis", "com", "total", "test_acc", "seconds")

    def rows(self) -> list[dict]:
        out = []
        for e in self.epochs:
            out.append({
                "epoch": e.epoch,
                "ce": f"{e.ce:.12g}",
                "aff": f"{e.affinity:.12g}",
                "dis": f"{e.dispersion:.12g}",
                "com": f"{e.compactness:.12g}",
                "total": f"{e.total:.12g}",
                "test_acc": "" if e.test_accuracy is None else f"{e.test_accuracy:.12g}",
                "seconds": f"{e.seconds:.6f}",
            })
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows())


def sgd_nesterov_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """Look-ahead Nesterov update, in place:

        v <- momentum * v - lr * g
        w <- w + momentum * v - lr * g

    With momentum 0 this reduces to plain SGD.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads, and velocity lists differ in length")
    for w, g, v in zip(params, grads, velocity):
        if w.shape != g.shape or w.shape != v.shape:
            raise ShapeError(
                f"parameter/grad/velocity shapes differ: {w.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v -= lr * g
        w += momentum * v - lr * g


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return streams.generator(seed, streams.STREAM_SHUFFLE + epoch).permutation(n)


def train(model: Model, train_set: Dataset, cfg: TrainConfig,
          test_set: Dataset | None = None) -> tuple[Model, TrainLog]:
    """Train in place and return (model, log)."""
    n = train_set.inputs.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    if train_set.labels.max() >= model.spec.class_count:
        raise ValueError(
            f"label {int(train_set.labels.max())} out of range for "
            f"{model.spec.class_count} classes")

    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    log = TrainLog()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = (_epoch_permutation(cfg.seed, epoch, n) if cfg.shuffle
                 else np.arange(n))
        sums = np.zeros(5)  # ce, aff, dis, com, total
        steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = train_set.inputs[idx]
            yb = train_set.labels[idx]
            logits, acts = model.forward_record(xb, yb)
            total, bd = unified_loss(logits, yb, acts, cfg.weights)
            model.zero_grad()
            ag.backward(total)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            sgd_nesterov_step([p.data for p in params], grads,
                              velocity, cfg.learning_rate, cfg.momentum)
            sums += (bd.ce, bd.affinity, bd.dispersion, bd.compactness, bd.total)
            steps += 1
        seconds = time.perf_counter() - t0

        acc = None
        if test_set is not None and cfg.eval_every > 0 and (
                (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            acc = evaluate(model, test_set).accuracy
        means = sums / steps
        log.epochs.append(EpochStats(
            epoch=epoch, ce=means[0], affinity=means[1], dispersion=means[2],
            compactness=means[3], total=means[4], seconds=seconds,
            test_accuracy=acc))
    return model, log


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray   # accuracy per class; 0.0 where the class is absent
    counts: np.ndarray


def evaluate(model: Model, dataset: Dataset, batch_size: int = 512) -> EvalResult:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    n = dataset.inputs.shape[0]
    n_classes = model.spec.class_count
    hits = np.zeros(n_classes)
    counts = np.zeros(n_classes)
    for start in range(0, n, batch_size):
        xb = dataset.inputs[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        pred = model.predict(xb)
        for c in range(n_classes):
            m = yb == c
            counts[c] += m.sum()
            hits[c] += (pred[m] == c).sum()
    per_class = np.divide(hits, counts, out=np.zeros(n_classes), where=counts > 0)
    accuracy = float(hits.sum() / max(counts.sum(), 1))
    return EvalResult(accuracy=accuracy, per_class=per_class, counts=counts)
