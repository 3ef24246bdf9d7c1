"""Replace a weak model's output for one class with a strong class module.

The weak model and the strong module run in parallel on each input. The
weak logit vector has its target component overwritten by the module's
scalar; a small linear adaptation layer (same input/output width) then
recalibrates the spliced vector, because the two sides were trained on
different data and their logits live on different scales. Only the
adaptation layer trains; the weak model and the module stay frozen, which
the gradient structure enforces: their outputs enter the graph as
constants.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import rng as streams
from .autograd import Tensor, softmax_cross_entropy
from .data import Dataset
from .decompose import ModuleSpec
from .nn import Model


def module_forward(module: ModuleSpec, x) -> np.ndarray:
    """Run a class module standalone: one logit per input sample."""
    return module.forward_scalar(x)


def assemble_om(weak_logits: np.ndarray, strong_scalar: np.ndarray,
                target_index: int) -> np.ndarray:
    """Copy of the weak logits with the target column spliced over.

    Works on a single vector or a batch of rows.
    """
    weak_logits = np.asarray(weak_logits, dtype=np.float64)
    width = weak_logits.shape[-1]
    if not 0 <= target_index < width:
        raise IndexError(f"target index {target_index} out of range for width {width}")
    out = weak_logits.copy()
    out[..., target_index] = strong_scalar
    return out


@dataclass
class AdaptationLog:
    epoch_losses: list[float] = field(default_factory=list)


@dataclass
class ReplacementAssembly:
    weak: Model
    strong_module: ModuleSpec
    target_index: int                    # position of the shared class in the weak output
    adapt_weight: Tensor | None = None   # [k, k], identity at init
    adapt_bias: Tensor | None = None     # [k], zero at init

    def __post_init__(self):
        k = self.weak.spec.class_count
        if not 0 <= self.target_index < k:
            raise ValueError(f"target index {self.target_index} not in [0, {k})")
        if self.adapt_weight is None:
            self.adapt_weight = ag.parameter(np.eye(k))
        if self.adapt_bias is None:
            self.adapt_bias = ag.parameter(np.zeros(k))
        self._strong_model = self.strong_module.to_model()

    def spliced_logits(self, x: np.ndarray) -> np.ndarray:
        """o_m: weak logits with the target component from the module."""
        weak_logits, _ = self.weak.forward(x)
        strong_logits, _ = self._strong_model.forward(x)
        return assemble_om(weak_logits.data, strong_logits.data[:, 0],
                           self.target_index)

    def adapted_logits(self, x: np.ndarray) -> np.ndarray:
        """o_a = A @ o_m + b."""
        return self._adapt(Tensor(self.spliced_logits(x))).data

    def _adapt(self, om: Tensor) -> Tensor:
        return om.matmul(self.adapt_weight.transpose()) + self.adapt_bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.adapted_logits(x), axis=1)


def train_adaptation(asm: ReplacementAssembly, train_set: Dataset,
                     epochs: int = 10, lr: float = 0.05, batch_size: int = 32,
                     seed: int = 0) -> AdaptationLog:
    """Fit the adaptation layer with cross-entropy; plain SGD, no momentum.

    The weak model and the strong module are frozen: their logits enter
    the graph as constants, so no gradient can reach them.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("adaptation training set is empty")
    log = AdaptationLog()
    params = [asm.adapt_weight, asm.adapt_bias]
    for epoch in range(epochs):
        order = streams.generator(seed, streams.STREAM_SHUFFLE + epoch).permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            om = Tensor(asm.spliced_logits(train_set.inputs[idx]))
            loss = softmax_cross_entropy(asm._adapt(om), train_set.labels[idx])
            ag.zero_grads(params)
            ag.backward(loss)
            for p in params:
                p.data -= lr * p.grad
            losses.append(float(loss.data))
        log.epoch_losses.append(float(np.mean(losses)))
    return log


@dataclass
class ReplacementOutcome:
    pre_target_accuracy: float
    post_target_accuracy: float
    pre_nontarget_accuracy: float
    post_nontarget_accuracy: float
    adaptation_log: AdaptationLog = field(default_factory=AdaptationLog)

    def to_json(self, **extra) -> str:
        payload = asdict(self)
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def _split_accuracy(pred: np.ndarray, labels: np.ndarray,
                    target: int, k: int) -> tuple[float, float]:
    target_mask = labels == target
    target_acc = float((pred[target_mask] == target).mean()) if target_mask.any() else 0.0
    others = []
    for c in range(k):
        if c == target:
            continue
        m = labels == c
        if m.any():
            others.append(float((pred[m] == c).mean()))
    return target_acc, float(np.mean(others)) if others else 0.0


def evaluate_replacement(asm: ReplacementAssembly, test_set: Dataset,
                         adaptation_log: AdaptationLog | None = None) -> ReplacementOutcome:
    """Target-class and mean non-target accuracy, before and after."""
    k = asm.weak.spec.class_count
    pre_pred = asm.weak.predict(test_set.inputs)
    post_pred = asm.predict(test_set.inputs)
    pre_t, pre_nt = _split_accuracy(pre_pred, test_set.labels, asm.target_index, k)
    post_t, post_nt = _split_accuracy(post_pred, test_set.labels, asm.target_index, k)
    return ReplacementOutcome(
        pre_target_accuracy=pre_t, post_target_accuracy=post_t,
        pre_nontarget_accuracy=pre_nt, post_nontarget_accuracy=post_nt,
        adaptation_log=adaptation_log or AdaptationLog())
