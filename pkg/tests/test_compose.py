import json
from itertools import combinations

import numpy as np
import pytest

from moda import (build_model, compose, decompose_all, evaluate,
                  module_metrics, reuse_accuracy)
from moda import rng as streams
from moda.compose import module_overlap, union_masks
from moda.data import Dataset
from moda.nn import cnn_spec, count_params, mlp_spec


@pytest.fixture(scope="module")
def modules(trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, _ = blobs_data
    return decompose_all(model, train_ds, 0.9)


def test_compose_matches_masked_forward_all_subsets(trained_blobs, blobs_data, modules):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    by = {m.class_id: m for m in modules}
    for k in (2, 3, 4):
        for classes in combinations(range(4), k):
            cm = compose([by[c] for c in classes], model)
            hidden, out = union_masks([by[c] for c in classes], 4)
            oracle = model.forward_masked(test_ds.inputs, hidden, out)
            got = cm.logits(test_ds.inputs)
            assert np.abs(got - oracle[:, list(classes)]).max() <= 1e-9


def test_compose_order_free(trained_blobs, modules, blobs_data):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    a = compose([modules[0], modules[2]], model)
    b = compose([modules[2], modules[0]], model)
    assert a.class_order == [0, 2] and b.class_order == [2, 0]
    assert np.array_equal(a.predict(test_ds.inputs), b.predict(test_ds.inputs))


def test_compose_rejects_duplicates_and_too_few(trained_blobs, modules):
    model, _ = trained_blobs
    with pytest.raises(ValueError, match="duplicate"):
        compose([modules[0], modules[0]], model)
    with pytest.raises(ValueError, match="at least 2"):
        compose([modules[0]], model)


def test_compose_rejects_foreign_model(modules, blobs_data):
    other = build_model(mlp_spec(2, [32, 32], 4, seed=99))
    with pytest.raises(ValueError, match="different model"):
        compose([modules[0], modules[1]], other)


def test_reuse_accuracy_matches_masked_oracle(trained_blobs, blobs_data, modules):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    cm = compose(modules, model)
    hidden, out = union_masks(modules, 4)
    oracle_pred = np.argmax(model.forward_masked(test_ds.inputs, hidden, out), axis=1)
    oracle_acc = float((oracle_pred == test_ds.labels).mean())
    assert reuse_accuracy(cm, test_ds) == oracle_acc


def test_reuse_accuracy_rejects_out_of_set_labels(trained_blobs, modules, blobs_data):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    cm = compose(modules[:2], model)
    with pytest.raises(ValueError, match="outside the composition"):
        reuse_accuracy(cm, test_ds)


def test_single_class_reuse_accuracy(trained_blobs, modules, blobs_data):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    cm = compose(modules[:2], model)
    only0 = test_ds.subset(test_ds.labels == 0)
    acc = reuse_accuracy(cm, only0)
    pred = cm.predict(only0.inputs)
    assert acc == float((pred == 0).mean())


def test_composed_within_3_points_of_full(trained_blobs, blobs_data, modules):
    model, _ = trained_blobs
    _, test_ds = blobs_data
    by = {m.class_id: m for m in modules}
    for k in (2, 3):
        for classes in combinations(range(4), k):
            cm = compose([by[c] for c in classes], model)
            sub = test_ds.subset(np.isin(test_ds.labels, classes))
            r = reuse_accuracy(cm, sub)
            f = evaluate(model, sub).accuracy
            assert r >= f - 0.03


def test_metrics_identity_module():
    # module retaining everything has size ratio (total - pruned output rows) / total
    model = build_model(mlp_spec(2, [4], 2, seed=3))
    xs = streams.generator(3, 60).standard_normal((40, 2))
    ds = Dataset(xs, np.arange(40) % 2, 2)
    from moda import compute_frequencies, extract_module
    freq = compute_frequencies(model, ds)
    freq.freqs[0][:] = 1.0
    mods = [extract_module(model, freq, c, 1.0) for c in (0, 1)]
    rep = module_metrics(mods, model)
    _, total = count_params(model)
    expect = (total - (4 + 1)) / total  # output layer keeps one of two rows
    assert rep.module_size_ratio[0] == pytest.approx(expect, abs=0)
    # identical hidden retention: pairwise overlap equals the hidden share
    hidden = 4 * 2 + 4
    assert rep.mean_pairwise_overlap == pytest.approx(hidden / total, abs=0)


def test_overlap_symmetric(modules):
    for a in modules:
        for b in modules:
            assert module_overlap(a, b) == module_overlap(b, a)


def test_overlap_self_equals_size(trained_blobs, modules):
    model, _ = trained_blobs
    rep = module_metrics(modules, model)
    for m in modules:
        assert module_overlap(m, m) == pytest.approx(rep.module_size_ratio[m.class_id], abs=1e-15)


def test_composed_size_bounds(trained_blobs, modules):
    model, _ = trained_blobs
    by = {m.class_id: m for m in modules}
    for classes in [(0, 1), (1, 2, 3), (0, 1, 2, 3)]:
        subset = [by[c] for c in classes]
        rep = module_metrics(subset, model)
        sizes = [rep.module_size_ratio[c] for c in classes]
        assert rep.composed_size_ratio <= sum(sizes) + 1e-15
        assert rep.composed_size_ratio >= max(sizes) - 1e-15
        assert 0.0 <= rep.composed_flops_ratio <= 1.0


def test_composed_params_never_exceed_source(trained_blobs, modules):
    model, _ = trained_blobs
    cm = compose(modules, model)
    _, composed_total = count_params(cm.model)
    _, source_total = count_params(model)
    assert composed_total <= source_total


def test_metrics_hand_counted_toy():
    model = build_model(mlp_spec(2, [3], 2, seed=8))
    from moda.decompose import FrequencyTable, extract_module
    freq = FrequencyTable(
        freqs=[np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])],
        class_counts=np.array([5, 5]), layer_indices=[0])
    m0 = extract_module(model, freq, 0, 0.9)
    m1 = extract_module(model, freq, 1, 0.9)
    # total = 3*2+3 + 2*3+2 = 17; module0: units {0,1}: 2*2+2 + 1*2+1 = 9
    assert m0.weight_count() == 9
    assert m1.weight_count() == 9
    rep = module_metrics([m0, m1], model)
    assert rep.module_size_ratio[0] == pytest.approx(9 / 17, abs=0)
    # shared: unit 1 -> 1*2 weights + 1 bias = 3; output rows disjoint
    assert rep.mean_pairwise_overlap == pytest.approx(3 / 17, abs=0)
    # element union: hidden {0,1,2}x{0,1} + 3 biases + two 2-wide output
    # rows with biases = 9 + 3 + 3 = 15 of 17
    assert rep.composed_size_ratio == pytest.approx(15 / 17, abs=0)


def test_flops_reduction_weaker_than_size_on_cnn():
    """Convs dominate FLOPs, so pruning dense units shrinks size more
    than FLOPs."""
    spec = cnn_spec((1, 8, 8), [4, 4], [16], 3, seed=5)
    model = build_model(spec)
    xs = streams.generator(5, 61).standard_normal((60, 1, 8, 8))
    ds = Dataset(xs, np.arange(60) % 3, 3)
    mods = decompose_all(model, ds, tau=0.6)
    rep = module_metrics(mods[:2], model)
    assert rep.composed_flops_ratio >= rep.composed_size_ratio


def test_metrics_report_json(modules, trained_blobs):
    model, _ = trained_blobs
    rep = module_metrics(modules, model, reuse_acc=0.5)
    payload = json.loads(rep.to_json(extra_field=1))
    assert payload["reuse_accuracy"] == 0.5
    assert payload["extra_field"] == 1
    assert set(payload["module_size_ratio"]) == {"0", "1", "2", "3"}
