"""Acceptance suite: one test per exit criterion, each printing a
pass/fail line. Run with `pytest tests/test_acceptance.py -v -s`.

Shared state flows forward only (criterion 9 replays earlier runs to
check bit-identical metrics), so this module expects to run in file
order, which is pytest's default.
"""
import os
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from moda import (LossWeights, Tensor, TrainConfig, build_model, compose,
                  decompose_all, evaluate, make_blobs, module_metrics,
                  reuse_accuracy, sgd_nesterov_step, split_for_replacement,
                  train, unified_loss)
from moda import autograd as ag
from moda import rng as streams
from moda.compose import union_masks
from moda.data import SplitPlan, read_idx
from moda.decompose import compute_frequencies, extract_module, retained_units
from moda.gradcheck import format_table, run_all
from moda.losses import affinity_loss, compactness_loss, dispersion_loss
from moda.nn import ActivationBatch, cnn_spec, mlp_spec
from moda.replace import ReplacementAssembly, evaluate_replacement, train_adaptation
from moda.training import _epoch_permutation

import oracles
from conftest import BLOBS, TRAIN

_state: dict = {}


def _report(num, desc, passed):
    print(f"\ncriterion {num:>2} [{'PASS' if passed else 'FAIL'}] {desc}")
    assert passed, f"criterion {num} failed: {desc}"


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_all(seed=0, instances=20)
    elapsed = time.perf_counter() - t0
    print()
    print(format_table(results))
    ok = all(r.passed for r in results) and elapsed < 30.0
    _report(1, f"finite-difference suite, 20 instances/op, {elapsed:.1f}s", ok)


# ---------------------------------------------------------------------------
# 2. loss-oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_2_loss_oracle_equivalence():
    worst = 0.0
    for k in range(50):
        rng = streams.generator(2000 + k, 0)
        n = int(rng.integers(2, 33))
        n_classes = int(rng.integers(2, 5))
        labels = rng.integers(0, n_classes, size=n)
        widths = rng.integers(2, 9, size=int(rng.integers(1, 4)))
        mats = [np.abs(rng.standard_normal((n, int(w)))) for w in widths]
        acts = ActivationBatch(layers=[Tensor(m) for m in mats],
                               labels=labels,
                               layer_indices=list(range(len(mats))))
        diffs = [
            abs(affinity_loss(acts).value.item() - oracles.affinity(mats, labels)),
            abs(dispersion_loss(acts).value.item() - oracles.dispersion(mats, labels)),
            abs(compactness_loss(acts).value.item() - oracles.compactness(mats, labels)),
        ]
        worst = max(worst, *diffs)
    _report(2, f"aff/dis/com vs nested-loop oracles on 50 batches, "
               f"worst |diff| {worst:.2e}", worst <= 1e-10)


# ---------------------------------------------------------------------------
# 3. degenerate unified loss
# ---------------------------------------------------------------------------

def test_criterion_3_degenerate_unified(blobs_data):
    zero = LossWeights(0.0, 0.0, 0.0)
    worst = 0.0
    for k in range(10):
        rng = streams.generator(3000 + k, 0)
        labels = rng.integers(0, 3, size=12)
        logits = Tensor(rng.standard_normal((12, 3)))
        mats = [np.abs(rng.standard_normal((12, 5)))]
        acts = ActivationBatch(layers=[Tensor(m) for m in mats], labels=labels,
                               layer_indices=[0])
        total, bd = unified_loss(logits, labels, acts, zero)
        ce = ag.softmax_cross_entropy(Tensor(logits.data), labels)
        worst = max(worst, abs(total.item() - ce.item()))

    train_ds, _ = blobs_data
    cfg = TrainConfig(epochs=5, batch_size=64, seed=9, weights=zero)
    model, _ = train(build_model(mlp_spec(2, [16], 4, seed=9)), train_ds, cfg)

    manual = build_model(mlp_spec(2, [16], 4, seed=9))
    params = manual.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        order = _epoch_permutation(cfg.seed, epoch, n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, _ = manual.forward(Tensor(train_ds.inputs[idx]))
            loss = ag.softmax_cross_entropy(logits, train_ds.labels[idx])
            manual.zero_grad()
            ag.backward(loss)
            sgd_nesterov_step([p.data for p in params],
                              [p.grad for p in params], velocity,
                              cfg.learning_rate, cfg.momentum)
    bitwise = model.param_bytes() == manual.param_bytes()
    _report(3, f"zero-weight total==ce (worst {worst:.2e}) and zero-weight "
               f"training bit-equals plain CE training", worst <= 1e-12 and bitwise)


# ---------------------------------------------------------------------------
# 4. composition oracle over all class subsets
# ---------------------------------------------------------------------------

def test_criterion_4_composition_oracle(trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, test_ds = blobs_data
    t0 = time.perf_counter()
    modules = decompose_all(model, train_ds, 0.9)
    by = {m.class_id: m for m in modules}
    worst = 0.0
    checked = 0
    acc_exact = True
    for k in (2, 3, 4):
        for classes in combinations(range(4), k):
            subset = [by[c] for c in classes]
            cm = compose(subset, model)
            hidden, out = union_masks(subset, 4)
            oracle_logits = model.forward_masked(test_ds.inputs, hidden, out)
            worst = max(worst, float(np.abs(
                cm.logits(test_ds.inputs) - oracle_logits[:, list(classes)]).max()))
            sub = test_ds.subset(np.isin(test_ds.labels, classes))
            oracle_pred = np.argmax(model.forward_masked(sub.inputs, hidden, out), axis=1)
            oracle_acc = float((oracle_pred == sub.labels).mean())
            acc_exact &= reuse_accuracy(cm, sub) == oracle_acc
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = checked == 11 and worst <= 1e-9 and acc_exact and elapsed < 60.0
    _report(4, f"{checked} subsets: composed vs masked logits worst "
               f"{worst:.1e}, reuse acc exact, {elapsed:.1f}s", ok)


# ---------------------------------------------------------------------------
# 5. module reuse analog
# ---------------------------------------------------------------------------

def _reuse_pipeline(gamma, seed=TRAIN["seed"]):
    """Fresh end-to-end run: train, decompose at 0.9, compose every 2-/3-
    class subset. Returns everything criterion 5/6/9 need."""
    train_ds, test_ds = make_blobs(**BLOBS)
    weights = LossWeights(alpha=1.0, beta=1.0, gamma=gamma)
    cfg = TrainConfig(epochs=TRAIN["epochs"], batch_size=TRAIN["batch_size"],
                      seed=seed, weights=weights)
    model = build_model(mlp_spec(2, [32, 32], 4, seed=seed))
    model, _ = train(model, train_ds, cfg)
    full_acc = evaluate(model, test_ds).accuracy
    modules = decompose_all(model, train_ds, 0.9)
    report = module_metrics(modules, model)
    by = {m.class_id: m for m in modules}
    subsets = {}
    for k in (2, 3):
        for classes in combinations(range(4), k):
            cm = compose([by[c] for c in classes], model)
            sub = test_ds.subset(np.isin(test_ds.labels, classes))
            subsets[classes] = (reuse_accuracy(cm, sub),
                                evaluate(model, sub).accuracy)
    return dict(model_bytes=model.param_bytes(), full_acc=full_acc,
                mean_size=report.mean_module_size,
                mean_overlap=report.mean_pairwise_overlap, subsets=subsets)


def test_criterion_5_reuse_analog():
    t0 = time.perf_counter()
    run = _reuse_pipeline(gamma=0.3)
    elapsed = time.perf_counter() - t0
    _state["crit5"] = run

    gaps = [abs(r - f) for r, f in run["subsets"].values()]
    ok = (run["full_acc"] >= 0.90
          and max(gaps) <= 0.03
          and run["mean_size"] <= 0.7
          and run["mean_overlap"] < run["mean_size"]
          and elapsed < 300.0)
    _report(5, f"full acc {run['full_acc']:.4f}, worst reuse gap "
               f"{max(gaps) * 100:.2f}pts, mean size {run['mean_size']:.4f}, "
               f"mean overlap {run['mean_overlap']:.4f}, {elapsed:.0f}s", ok)


# ---------------------------------------------------------------------------
# 6. compactness ablation
# ---------------------------------------------------------------------------

def test_criterion_6_compactness_ablation():
    base = _state.get("crit5") or _reuse_pipeline(gamma=0.3)
    ablated = _reuse_pipeline(gamma=0.0)
    mean_reuse = float(np.mean([r for r, _ in base["subsets"].values()]))
    mean_reuse_ablated = float(np.mean([r for r, _ in ablated["subsets"].values()]))
    drop = mean_reuse_ablated - mean_reuse
    ok = base["mean_size"] < ablated["mean_size"] and drop <= 0.02
    _report(6, f"mean size gamma=0.3 {base['mean_size']:.4f} < gamma=0 "
               f"{ablated['mean_size']:.4f}; reuse drop {drop * 100:.2f}pts", ok)


# ---------------------------------------------------------------------------
# 7. threshold sweep monotonicity
# ---------------------------------------------------------------------------

def test_criterion_7_tau_sweep(trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, _ = blobs_data
    freq = compute_frequencies(model, train_ds)
    taus = [0.1, 0.5, 0.8, 0.9, 0.95]
    contained = True
    sizes_by_tau = []
    for c in range(4):
        picks = [retained_units(freq, c, t) for t in taus]
        for lo, hi in zip(picks, picks[1:]):
            for layer_idx in lo:
                contained &= set(hi[layer_idx]) <= set(lo[layer_idx])
    for t in taus:
        mods = [extract_module(model, freq, c, t) for c in range(4)]
        sizes_by_tau.append(float(np.mean([m.weight_count() for m in mods])))
    non_increasing = all(a >= b for a, b in zip(sizes_by_tau, sizes_by_tau[1:]))
    _report(7, f"tau sweep sizes {['%.0f' % s for s in sizes_by_tau]} "
               f"containment={contained}", contained and non_increasing)


# ---------------------------------------------------------------------------
# 8. module replacement analog
# ---------------------------------------------------------------------------

REPLACE = dict(classes=4, per_class=400, dim=4, spread=1.5, seed=7)
REPLACE_SEED = 4


def _replacement_pipeline(seed=REPLACE_SEED):
    train_ds, test_ds = make_blobs(**REPLACE)
    plan = SplitPlan(strong_classes=(0, 1, 2), weak_classes=(2, 3), target=2,
                     shared_fraction=0.85, overfit_fraction=0.1, seed=seed)
    split = split_for_replacement(train_ds, test_ds, plan)

    strong = build_model(mlp_spec(4, [32, 32], 3, seed=seed))
    strong, _ = train(strong, split.strong_train,
                      TrainConfig(epochs=40, batch_size=64, seed=seed))
    strong_module = decompose_all(strong, split.strong_train, 0.9)[
        plan.strong_classes.index(plan.target)]

    weak = build_model(mlp_spec(4, [8], 2, seed=seed))
    weak, _ = train(weak, split.weak_overfit_train,
                    TrainConfig(epochs=8, batch_size=32, seed=seed,
                                weights=LossWeights(0.0, 0.0, 0.0)))
    weak.zero_grad()
    weak_bytes = weak.param_bytes()

    asm = ReplacementAssembly(weak=weak, strong_module=strong_module,
                              target_index=plan.weak_classes.index(plan.target))
    train_adaptation(asm, split.weak_train, epochs=10, lr=0.05, seed=seed)
    outcome = evaluate_replacement(asm, split.weak_test)
    isolated = (weak.param_bytes() == weak_bytes
                and all(p.grad is None for p in weak.parameters()))
    return outcome, isolated


def test_criterion_8_replacement_analog():
    t0 = time.perf_counter()
    outcome, isolated = _replacement_pipeline()
    elapsed = time.perf_counter() - t0
    _state["crit8"] = outcome
    gain = outcome.post_target_accuracy - outcome.pre_target_accuracy
    drop = outcome.pre_nontarget_accuracy - outcome.post_nontarget_accuracy
    ok = gain >= 0.03 and drop <= 0.02 and isolated and elapsed < 120.0
    _report(8, f"target {outcome.pre_target_accuracy:.3f}->"
               f"{outcome.post_target_accuracy:.3f} (+{gain * 100:.1f}pts), "
               f"non-target drop {drop * 100:.1f}pts, frozen={isolated}, "
               f"{elapsed:.0f}s", ok)


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism():
    base = _state.get("crit5") or _reuse_pipeline(gamma=0.3)
    again = _reuse_pipeline(gamma=0.3)
    same_pipeline = (again["model_bytes"] == base["model_bytes"]
                     and again["full_acc"] == base["full_acc"]
                     and again["mean_size"] == base["mean_size"]
                     and again["mean_overlap"] == base["mean_overlap"]
                     and again["subsets"] == base["subsets"])

    prev = _state.get("crit8") or _replacement_pipeline()[0]
    outcome, _ = _replacement_pipeline()
    same_replacement = (
        outcome.pre_target_accuracy == prev.pre_target_accuracy
        and outcome.post_target_accuracy == prev.post_target_accuracy
        and outcome.pre_nontarget_accuracy == prev.pre_nontarget_accuracy
        and outcome.post_nontarget_accuracy == prev.post_nontarget_accuracy)

    results = run_all(seed=0, instances=3)
    again_results = run_all(seed=0, instances=3)
    same_gradcheck = [r.max_rel_err for r in results] == [r.max_rel_err
                                                          for r in again_results]
    ok = same_pipeline and same_replacement and same_gradcheck
    _report(9, "bit-identical metrics across reruns (pipeline, replacement, "
               "gradcheck)", ok)


# ---------------------------------------------------------------------------
# 10. optional MNIST CNN run
# ---------------------------------------------------------------------------

MNIST_DIR = os.environ.get("MODA_MNIST_DIR", "")


@pytest.mark.skipif(not MNIST_DIR, reason="MODA_MNIST_DIR not set; IDX files "
                                          "not supplied")
def test_criterion_10_mnist_cnn():
    t0 = time.perf_counter()
    d = Path(MNIST_DIR)
    train_ds = read_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    test_ds = read_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    train_ds = train_ds.subset(np.arange(8000))

    model = build_model(cnn_spec((1, 28, 28), [8, 16], [64], 10, seed=0))
    cfg = TrainConfig(epochs=15, batch_size=128, seed=0)
    model, _ = train(model, train_ds, cfg)
    acc = evaluate(model, test_ds).accuracy

    modules = decompose_all(model, train_ds, 0.9)
    classes = (0, 1, 2, 3, 4)
    cm = compose([modules[c] for c in classes], model)
    sub = test_ds.subset(np.isin(test_ds.labels, classes))
    racc = reuse_accuracy(cm, sub)
    facc = evaluate(model, sub).accuracy
    report = module_metrics(modules, model)
    first_conv = report.per_layer_overlap[0]
    last_hidden = report.per_layer_overlap[-2]  # final dense before output
    elapsed = time.perf_counter() - t0
    ok = (acc >= 0.95 and abs(racc - facc) <= 0.03
          and first_conv > last_hidden and elapsed < 900.0)
    _report(10, f"mnist acc {acc:.4f}, 5-class reuse {racc:.4f} vs {facc:.4f}, "
                f"overlap conv1 {first_conv:.3f} > fc {last_hidden:.3f}, "
                f"{elapsed:.0f}s", ok)
