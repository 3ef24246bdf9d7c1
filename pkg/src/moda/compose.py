"""Merge class modules into a runnable k-class model, plus modularity metrics.

Composition is a layer-by-layer union of the modules' retained units; the
weights are sliced directly from the source model over (union out x union
in), and the output layer stacks one source row per selected class. The
composed logits therefore equal the source model's masked forward pass on
the selected rows, which is why reuse needs no fine-tuning.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .decompose import ModuleSpec, input_index_map
from .nn import LayerSpec, Model, ModelSpec, OUTPUT, count_params, flops_for_widths
from .serialize import model_digest


@dataclass
class ComposedModel:
    model: Model
    class_order: list[int]               # output row -> original class id
    retained: dict[int, np.ndarray]      # per modular layer: union unit indices
    source_spec: ModelSpec

    def predict(self, x) -> np.ndarray:
        """Original-class predictions via argmax over the k output rows."""
        rows = self.model.predict(x)
        return np.asarray(self.class_order)[rows]

    def logits(self, x) -> np.ndarray:
        out, _ = self.model.forward(x)
        return out.data


def _union_retained(modules: Sequence[ModuleSpec]) -> dict[int, np.ndarray]:
    union: dict[int, np.ndarray] = {}
    for idx in modules[0].retained:
        sets = [m.retained[idx] for m in modules]
        union[idx] = np.unique(np.concatenate(sets))
    return union


def compose(modules: Sequence[ModuleSpec], source: Model) -> ComposedModel:
    """Union-merge modules extracted from ``source`` into one k-class model."""
    if len(modules) < 2:
        raise ValueError("composition needs at least 2 modules")
    classes = [m.class_id for m in modules]
    if len(set(classes)) != len(classes):
        raise ValueError(f"duplicate class in composition: {classes}")
    digest = model_digest(source)
    for m in modules:
        if m.source_digest != digest:
            raise ValueError(
                f"module for class {m.class_id} comes from a different model "
                f"(digest 0x{m.source_digest:016x} != 0x{digest:016x})")

    union = _union_retained(modules)
    in_map = input_index_map(source.spec, union)

    new_layers: list[LayerSpec] = []
    params: list[tuple[np.ndarray, np.ndarray] | None] = []
    for i, layer in enumerate(source.spec.layers):
        if layer.modular:
            out_idx = union[i]
            in_idx = in_map[i]
            w = source.weights[i].data
            b = source.biases[i].data
            new_layers.append(LayerSpec(layer.kind, out_idx.size))
            params.append((w[np.ix_(out_idx, in_idx)].copy(), b[out_idx].copy()))
        elif layer.kind == OUTPUT:
            in_idx = in_map[i]
            w = source.weights[i].data
            b = source.biases[i].data
            rows = np.stack([w[m.class_id][in_idx] for m in modules])
            new_layers.append(LayerSpec(OUTPUT, len(modules)))
            params.append((rows, np.array([b[m.class_id] for m in modules])))
        else:
            new_layers.append(layer)
            params.append(None)

    spec = ModelSpec(tuple(new_layers), source.spec.input_shape, len(modules),
                     source.spec.seed)
    return ComposedModel(model=Model(spec, params=params),
                         class_order=list(classes), retained=union,
                         source_spec=source.spec)


def union_masks(modules: Sequence[ModuleSpec],
                class_count: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Boolean masks over the source model equivalent to composing: per
    modular layer the union of retained units, plus the selected classes."""
    union = _union_retained(modules)
    spec = modules[0].source_spec
    hidden = []
    for i in spec.modular_indices:
        m = np.zeros(spec.layers[i].units, dtype=bool)
        m[union[i]] = True
        hidden.append(m)
    out = np.zeros(class_count, dtype=bool)
    for m in modules:
        out[m.class_id] = True
    return hidden, out


def reuse_accuracy(cm: ComposedModel, dataset: Dataset,
                   batch_size: int = 512) -> float:
    """Top-1 accuracy of the composed model, without any fine-tuning."""
    selected = set(cm.class_order)
    present = set(int(c) for c in np.unique(dataset.labels))
    if not present <= selected:
        raise ValueError(
            f"dataset contains classes {sorted(present - selected)} outside the composition")
    hits = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        pred = cm.predict(dataset.inputs[start:start + batch_size])
        hits += (pred == dataset.labels[start:start + batch_size]).sum()
    return float(hits / n)


@dataclass
class MetricsReport:
    classes: list[int]
    module_size_ratio: dict[int, float]
    mean_module_size: float
    mean_pairwise_overlap: float
    min_pairwise_overlap: float
    max_pairwise_overlap: float
    composed_size_ratio: float
    composed_flops_ratio: float
    per_layer_overlap: list[float]
    reuse_accuracy: float | None = None

    def to_json(self, **extra) -> str:
        payload = asdict(self)
        payload["module_size_ratio"] = {str(k): v for k, v in
                                        payload["module_size_ratio"].items()}
        payload.update(extra)
        return json.dumps(payload, indent=2, sort_keys=True)


def _layer_param_sizes(spec: ModelSpec) -> dict[int, int]:
    """Numeric elements (weights + biases) per parametric source layer."""
    from .nn import layer_shapes
    shapes = layer_shapes(spec)
    sizes: dict[int, int] = {}
    for i, layer in enumerate(spec.layers):
        if not layer.parametric:
            continue
        per_unit = shapes[i][0] * (9 if layer.kind == "conv3x3" else 1)
        sizes[i] = layer.units * per_unit + layer.units
    return sizes


def _pair_overlap_by_layer(a: ModuleSpec, b: ModuleSpec) -> dict[int, int]:
    """Shared source weight elements per layer for a module pair.

    A weight is shared when both modules retain its output unit and its
    input unit; biases are shared when the output unit is. Output rows of
    distinct classes never overlap.
    """
    spec = a.source_spec
    in_a = input_index_map(spec, a.retained)
    in_b = input_index_map(spec, b.retained)
    shared: dict[int, int] = {}
    for i, layer in enumerate(spec.layers):
        if not layer.modular:
            continue
        out_shared = np.intersect1d(a.retained[i], b.retained[i]).size
        in_shared = np.intersect1d(in_a[i], in_b[i]).size
        per_link = 9 if layer.kind == "conv3x3" else 1
        shared[i] = out_shared * in_shared * per_link + out_shared
    out_layer = len(spec.layers) - 1
    if a.class_id == b.class_id:
        in_shared = np.intersect1d(in_a[out_layer], in_b[out_layer]).size
        shared[out_layer] = in_shared + 1
    else:
        shared[out_layer] = 0
    return shared


def module_overlap(a: ModuleSpec, b: ModuleSpec) -> float:
    """Shared weights of a pair divided by total source weights."""
    total = sum(_layer_param_sizes(a.source_spec).values())
    return sum(_pair_overlap_by_layer(a, b).values()) / total


def module_metrics(modules: Sequence[ModuleSpec], source: Model,
                   reuse_acc: float | None = None) -> MetricsReport:
    """All size/overlap/FLOPs ratios for a set of modules from one source."""
    if not modules:
        raise ValueError("need at least one module")
    spec = source.spec
    _, source_total = count_params(source)
    layer_sizes = _layer_param_sizes(spec)

    size_ratio = {m.class_id: m.weight_count() / source_total for m in modules}

    pair_overlaps = []
    per_layer_shared: dict[int, list[int]] = {i: [] for i in layer_sizes}
    for i in range(len(modules)):
        for j in range(i + 1, len(modules)):
            by_layer = _pair_overlap_by_layer(modules[i], modules[j])
            pair_overlaps.append(sum(by_layer.values()) / source_total)
            for k, v in by_layer.items():
                per_layer_shared[k].append(v)
    if pair_overlaps:
        mean_overlap = float(np.mean(pair_overlaps))
        min_overlap = float(np.min(pair_overlaps))
        max_overlap = float(np.max(pair_overlaps))
        per_layer = [float(np.mean(per_layer_shared[i]) / layer_sizes[i])
                     for i in sorted(layer_sizes)]
    else:
        mean_overlap = min_overlap = max_overlap = 0.0
        per_layer = [0.0 for _ in layer_sizes]

    # Composed size counts source weight elements claimed by at least one
    # module (so disjoint modules sum exactly and the total never exceeds
    # the sum of module sizes). The runnable composed network additionally
    # carries the union-rectangle cross weights; its compute cost is what
    # the FLOPs ratio reflects.
    in_maps = {id(m): input_index_map(spec, m.retained) for m in modules}
    union = _union_retained(list(modules))
    composed_weights = 0
    widths = []
    from .nn import layer_shapes
    shapes = layer_shapes(spec)
    for i, layer in enumerate(spec.layers):
        if layer.modular:
            per_link = 9 if layer.kind == "conv3x3" else 1
            elems = np.zeros((layer.units, shapes[i][0]), dtype=bool)
            bias_elems = np.zeros(layer.units, dtype=bool)
            for m in modules:
                out_idx = m.retained[i]
                in_idx = in_maps[id(m)][i]
                elems[np.ix_(out_idx, in_idx)] = True
                bias_elems[out_idx] = True
            composed_weights += int(elems.sum()) * per_link + int(bias_elems.sum())
            widths.append(union[i].size)
        elif layer.kind == OUTPUT:
            # distinct classes: one disjoint row per module
            for m in modules:
                composed_weights += in_maps[id(m)][i].size + 1
            widths.append(len(modules))
        else:
            widths.append(0)
    _, source_flops = flops_for_widths(spec, [l.units if l.parametric else 0
                                              for l in spec.layers])
    _, composed_flops = flops_for_widths(spec, widths)

    return MetricsReport(
        classes=[m.class_id for m in modules],
        module_size_ratio=size_ratio,
        mean_module_size=float(np.mean(list(size_ratio.values()))),
        mean_pairwise_overlap=mean_overlap,
        min_pairwise_overlap=min_overlap,
        max_pairwise_overlap=max_overlap,
        composed_size_ratio=composed_weights / source_total,
        composed_flops_ratio=composed_flops / source_flops,
        per_layer_overlap=per_layer,
        reuse_accuracy=reuse_acc,
    )
