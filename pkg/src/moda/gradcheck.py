"""Finite-difference gradient checking.

Central differences with step h=1e-5 against the analytic gradients from
``backward``. Relative error for a tensor is max|analytic - numeric|
divided by max(|analytic|, |numeric|, 1e-12) over all entries. Inputs are
drawn so that no entry sits within 1e-3 of a ReLU/abs kink.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import rng as streams

FD_STEP = 1e-5


def numeric_gradient(f: Callable[[], float], x: np.ndarray,
                     step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x``.

    ``f`` must read the current contents of ``x``; entries are perturbed
    in place and restored.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(build: Callable[[Sequence[ag.Tensor]], ag.Tensor],
          inputs: Sequence[np.ndarray], step: float = FD_STEP) -> float:
    """Max relative error of analytic vs numeric gradients over all inputs.

    ``build`` maps leaf tensors to a scalar loss tensor.
    """
    leaves = [ag.parameter(x) for x in inputs]
    loss = build(leaves)
    ag.backward(loss)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def value() -> float:
            fresh = [ag.Tensor(leaf2.data) for leaf2 in leaves]
            return float(build(fresh).data)

        numeric = numeric_gradient(value, leaf.data, step=step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_kinks(rng: np.random.Generator, shape, margin: float = 1e-2) -> np.ndarray:
    """Random values whose magnitudes stay clear of 0."""
    x = rng.standard_normal(shape)
    sign = np.where(x >= 0, 1.0, -1.0)
    return x + sign * margin


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _suite_matmul(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 2))
    return check(lambda t: t[0].matmul(t[1]).sum(), [a, b])


def _suite_add_mul_div(rng):
    a = rng.standard_normal((3, 4))
    b = _away_from_kinks(rng, (3, 4), margin=0.5)  # |denominator| >= 0.5
    c = rng.standard_normal((4,))
    return check(lambda t: ((t[0] + t[2]) * t[0] / t[1]).sum(), [a, b, c])


def _suite_sum_mean(rng):
    a = rng.standard_normal((5, 3))
    return check(lambda t: (t[0].sum(axis=1) * t[0].mean(axis=0).sum()).sum(), [a])


def _suite_reshape_transpose(rng):
    a = rng.standard_normal((4, 6))
    return check(lambda t: (t[0].transpose().reshape(3, 8) * np.arange(24.0).reshape(3, 8)).sum(), [a])


def _suite_relu(rng):
    a = _away_from_kinks(rng, (4, 5))
    w = rng.standard_normal((4, 5))
    return check(lambda t: (t[0].relu() * w).sum(), [a])


def _suite_abs(rng):
    a = _away_from_kinks(rng, (4, 5))
    return check(lambda t: ag.l1_sum(t[0]), [a])


def _suite_sqrt_clip(rng):
    a = np.abs(rng.standard_normal((3, 3))) + 0.5
    return check(lambda t: (t[0] * t[0]).sum(axis=1).clip_min(1e-24).sqrt().sum(), [a])


def _suite_conv2d(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3)
    w = rng.standard_normal((2, 3, 5, 5))
    return check(lambda t: (ag.conv2d(t[0], t[1], t[2]) * w).sum(), [x, k, b])


def _suite_maxpool(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((2, 2, 2, 2))
    return check(lambda t: (ag.maxpool2x2(t[0]) * w).sum(), [x])


def _suite_spatial_mean(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((2, 3))
    return check(lambda t: (ag.spatial_mean(t[0]) * w).sum(), [x])


def _suite_cosine(rng):
    a = _away_from_kinks(rng, (6,))
    b = _away_from_kinks(rng, (6,))
    return check(lambda t: ag.cosine_sim(t[0], t[1]), [a, b])


def _suite_softmax_ce(rng):
    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, size=4)
    return check(lambda t: ag.softmax_cross_entropy(t[0], labels), [logits])


def _suite_mlp_composite(rng):
    """Two-layer ReLU net under cross-entropy, differentiated end to end."""
    x = rng.standard_normal((6, 4))
    w1 = rng.standard_normal((5, 4)) * 0.7
    b1 = _away_from_kinks(rng, (5,), margin=0.1)
    w2 = rng.standard_normal((3, 5)) * 0.7
    b2 = rng.standard_normal(3)
    labels = rng.integers(0, 3, size=6)

    def build(t):
        h = t[0].matmul(t[1].transpose()) + t[2]
        h = h.relu()
        logits = h.matmul(t[3].transpose()) + t[4]
        return ag.softmax_cross_entropy(logits, labels)

    return check(build, [x, w1, b1, w2, b2])


def _suite_modular_losses(rng):
    from . import losses
    from .nn import ActivationBatch

    labels = np.array([0, 0, 1, 1, 2, 2])
    mats = [np.abs(_away_from_kinks(rng, (6, 5))) + 0.05 for _ in range(2)]

    def build(t):
        acts = ActivationBatch(layers=list(t), labels=labels, layer_indices=[0, 1])
        aff = losses.affinity_loss(acts)
        dis = losses.dispersion_loss(acts)
        com = losses.compactness_loss(acts)
        return aff.value + dis.value + com.value

    return check(build, mats)


def _suite_unified_loss(rng):
    from . import losses
    from .nn import ActivationBatch

    labels = np.array([0, 0, 1, 1, 2, 2])
    x = rng.standard_normal((6, 4))
    w1 = rng.standard_normal((5, 4)) * 0.8
    b1 = _away_from_kinks(rng, (5,), margin=0.2)
    w2 = rng.standard_normal((3, 5)) * 0.8
    b2 = rng.standard_normal(3)

    def build(t):
        h = (t[0].matmul(t[1].transpose()) + t[2]).relu()
        logits = h.matmul(t[3].transpose()) + t[4]
        acts = ActivationBatch(layers=[h], labels=labels, layer_indices=[0])
        total, _ = losses.unified_loss(logits, labels, acts, losses.LossWeights())
        return total

    return check(build, [x, w1, b1, w2, b2])


# (name, suite fn, tolerance). Linear ops at 1e-6; conv at 1e-5; composite
# paths through nonlinearities at 1e-4.
_SUITES = [
    ("matmul", _suite_matmul, 1e-6),
    ("add/mul/div", _suite_add_mul_div, 1e-6),
    ("sum/mean", _suite_sum_mean, 1e-6),
    ("reshape/transpose", _suite_reshape_transpose, 1e-6),
    ("relu", _suite_relu, 1e-6),
    ("l1_sum", _suite_abs, 1e-6),
    ("sqrt/clip_min", _suite_sqrt_clip, 1e-6),
    ("conv2d", _suite_conv2d, 1e-5),
    ("maxpool2x2", _suite_maxpool, 1e-6),
    ("spatial_mean", _suite_spatial_mean, 1e-6),
    ("cosine_sim", _suite_cosine, 1e-4),
    ("softmax_cross_entropy", _suite_softmax_ce, 1e-6),
    ("mlp_composite", _suite_mlp_composite, 1e-4),
    ("modular_losses", _suite_modular_losses, 1e-4),
    ("unified_loss", _suite_unified_loss, 1e-4),
]


def run_all(seed: int = 0, instances: int = 20) -> list[SuiteResult]:
    """Run every suite ``instances`` times on fresh random draws."""
    results = []
    for suite_idx, (name, fn, tol) in enumerate(_SUITES):
        worst = 0.0
        for k in range(instances):
            rng = streams.generator(seed, streams.STREAM_GRADCHECK + 1009 * suite_idx + k)
            worst = max(worst, fn(rng))
        results.append(SuiteResult(name=name, max_rel_err=worst, tolerance=tol))
    return results


def format_table(results: Sequence[SuiteResult]) -> str:
    lines = [f"{'suite':<24} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<24} {r.max_rel_err:>12.3e} {r.tolerance:>8.0e}  {status}")
    return "\n".join(lines)
