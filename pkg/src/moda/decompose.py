"""Frequency-threshold decomposition of a trained model into class modules.

A unit (neuron or conv channel) enters the module for class c when its
recorded channel-wise activation is strictly positive on at least a
fraction tau of that class's training samples. Retained units keep their
exact source weights, restricted to the retained units of the previous
layer; the output layer keeps only the class row.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .nn import (CONV, DENSE, FLATTEN, OUTPUT, POOL, LayerSpec, Model,
                 ModelSpec, layer_shapes)
from .serialize import model_digest

log = logging.getLogger(__name__)


@dataclass
class FrequencyTable:
    """Per modular layer: [units x classes] activation frequencies in [0,1]."""
    freqs: list[np.ndarray]
    class_counts: np.ndarray
    layer_indices: list[int]


def compute_frequencies(model: Model, dataset: Dataset,
                        batch_size: int = 256) -> FrequencyTable:
    """Fraction of each class's samples on which each unit fires (> 0)."""
    n_classes = model.spec.class_count
    counts = np.zeros(n_classes, dtype=np.int64)
    modular = model.spec.modular_indices
    unit_counts = [model.spec.layers[i].units for i in modular]
    fire = [np.zeros((u, n_classes), dtype=np.int64) for u in unit_counts]

    n = len(dataset)
    for start in range(0, n, batch_size):
        xb = dataset.inputs[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        _, acts = model.forward_record(xb, yb)
        for c in np.unique(yb):
            rows = yb == c
            counts[c] += rows.sum()
            for k, layer in enumerate(acts.layers):
                fire[k][:, c] += (layer.data[rows] > 0.0).sum(axis=0)

    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no samples in the dataset")
    freqs = [f / counts[None, :] for f in fire]
    return FrequencyTable(freqs=freqs, class_counts=counts, layer_indices=list(modular))


def flatten_expand(channels: np.ndarray, positions_per_channel: int) -> np.ndarray:
    """Map retained conv channels to their flattened feature positions."""
    channels = np.asarray(channels, dtype=np.int64)
    offsets = np.arange(positions_per_channel, dtype=np.int64)
    return (channels[:, None] * positions_per_channel + offsets[None, :]).reshape(-1)


def input_index_map(spec: ModelSpec, retained: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """For each parametric layer, the retained input indices it sees.

    ``retained`` maps modular layer index -> sorted unit indices. The raw
    input is implicitly fully retained; pooling passes channel identity
    through; flatten expands each retained channel to its H*W positions.
    """
    shapes = layer_shapes(spec)
    result: dict[int, np.ndarray] = {}
    prev: np.ndarray | None = None  # None = all of the current feature space
    for i, layer in enumerate(spec.layers):
        if layer.kind in (DENSE, OUTPUT):
            width = shapes[i][0]
            result[i] = np.arange(width) if prev is None else prev
            if layer.kind == DENSE:
                prev = retained[i]
        elif layer.kind == CONV:
            width = shapes[i][0]
            result[i] = np.arange(width) if prev is None else prev
            prev = retained[i]
        elif layer.kind == POOL:
            pass  # channel identity
        elif layer.kind == FLATTEN:
            positions = shapes[i][1] * shapes[i][2]
            channels = np.arange(shapes[i][0]) if prev is None else prev
            prev = flatten_expand(channels, positions)
    return result


@dataclass
class LayerSlice:
    layer_index: int
    retained: np.ndarray      # sorted unit indices within the source layer
    weight: np.ndarray        # [kept_out, kept_in] or [kept_out, kept_in, 3, 3]
    bias: np.ndarray          # [kept_out]


@dataclass
class ModuleSpec:
    """Weights of one class: per-layer retained units and their slices."""
    class_id: int
    source_spec: ModelSpec
    layers: list[LayerSlice]
    output_weight: np.ndarray   # [1, kept_in]
    output_bias: np.ndarray     # [1]
    tau: float
    source_digest: int
    seed: int

    @property
    def retained(self) -> dict[int, np.ndarray]:
        return {s.layer_index: s.retained for s in self.layers}

    def weight_count(self) -> int:
        total = 0
        for s in self.layers:
            total += s.weight.size + s.bias.size
        return total + self.output_weight.size + self.output_bias.size

    def to_model(self) -> Model:
        """Run the module standalone: a one-output-row network."""
        new_layers = []
        slices = {s.layer_index: s for s in self.layers}
        params: list[tuple[np.ndarray, np.ndarray] | None] = []
        for i, layer in enumerate(self.source_spec.layers):
            if layer.kind == OUTPUT:
                new_layers.append(LayerSpec(OUTPUT, 1))
                params.append((self.output_weight, self.output_bias))
            elif layer.modular:
                s = slices[i]
                new_layers.append(LayerSpec(layer.kind, len(s.retained)))
                params.append((s.weight, s.bias))
            else:
                new_layers.append(layer)
                params.append(None)
        spec = ModelSpec(tuple(new_layers), self.source_spec.input_shape, 1,
                         self.source_spec.seed)
        return Model(spec, params=params)

    def forward_scalar(self, x) -> np.ndarray:
        """The class logit this module produces for each input sample."""
        logits, _ = self.to_model().forward(x)
        return logits.data[:, 0]


def retained_units(freq: FrequencyTable, class_id: int, tau: float) -> dict[int, np.ndarray]:
    """Per-layer unit selection for one class; order follows the model.

    Layers where no unit meets tau fall back to the single most frequent
    unit so the module stays connected.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    picked: dict[int, np.ndarray] = {}
    for layer_idx, table in zip(freq.layer_indices, freq.freqs):
        col = table[:, class_id]
        keep = np.flatnonzero(col >= tau)
        if keep.size == 0:
            keep = np.array([int(np.argmax(col))], dtype=np.int64)
            log.warning("class %d layer %d: no unit reaches tau=%g, "
                        "falling back to unit %d", class_id, layer_idx, tau, keep[0])
        picked[layer_idx] = keep
    return picked


def extract_module(model: Model, freq: FrequencyTable, class_id: int,
                   tau: float, digest: int | None = None) -> ModuleSpec:
    if not 0 <= class_id < model.spec.class_count:
        raise ValueError(f"class {class_id} out of range")
    retained = retained_units(freq, class_id, tau)
    in_map = input_index_map(model.spec, retained)

    slices: list[LayerSlice] = []
    out_w = out_b = None
    for i, layer in enumerate(model.spec.layers):
        if layer.modular:
            out_idx = retained[i]
            in_idx = in_map[i]
            w = model.weights[i].data
            b = model.biases[i].data
            slices.append(LayerSlice(
                layer_index=i,
                retained=out_idx.copy(),
                weight=w[np.ix_(out_idx, in_idx)].copy(),
                bias=b[out_idx].copy()))
        elif layer.kind == OUTPUT:
            in_idx = in_map[i]
            out_w = model.weights[i].data[class_id][in_idx][None, :].copy()
            out_b = model.biases[i].data[class_id:class_id + 1].copy()

    return ModuleSpec(class_id=class_id, source_spec=model.spec, layers=slices,
                      output_weight=out_w, output_bias=out_b, tau=tau,
                      source_digest=model_digest(model) if digest is None else digest,
                      seed=model.spec.seed)


def decompose_all(model: Model, dataset: Dataset, tau: float,
                  freq: FrequencyTable | None = None) -> list[ModuleSpec]:
    """One module per class from a shared frequency table."""
    if freq is None:
        freq = compute_frequencies(model, dataset)
    digest = model_digest(model)
    return [extract_module(model, freq, c, tau, digest=digest)
            for c in range(model.spec.class_count)]
