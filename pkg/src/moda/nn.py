"""Sequential ReLU networks whose forward pass records per-layer activations.

A model is a chain of dense / conv3x3 / maxpool2x2 / flatten layers closed
by a single output layer. Dense and conv layers "participate in
modularity": their post-ReLU activations (channel-wise, spatially averaged
for conv) are recorded per sample and feed the modular losses and the
frequency-based decomposer. The output layer is excluded; its logits are
already class-separated by the cross-entropy term.

Recording is observation-only: it adds no parameters and does not change
the logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import rng as streams
from .autograd import ShapeError, Tensor

DENSE = "dense"
CONV = "conv3x3"
POOL = "maxpool2x2"
FLATTEN = "flatten"
OUTPUT = "output"

_PARAMETRIC = (DENSE, CONV, OUTPUT)

# Logit value reported for output classes excluded by a mask; only ever
# consumed by argmax.
NEG_SENTINEL = -np.finfo(np.float64).max


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus output width (neurons or channels).

    ``units`` is ignored for pool/flatten layers. Dense and conv layers
    participate in modularity; pool, flatten, and the output layer do not.
    """
    kind: str
    units: int = 0

    @property
    def modular(self) -> bool:
        return self.kind in (DENSE, CONV)

    @property
    def parametric(self) -> bool:
        return self.kind in _PARAMETRIC


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]  # (features,) or (channels, H, W)
    class_count: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        # class_count 1 is allowed so a single extracted module can run
        # standalone as a one-row network
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        kinds = [l.kind for l in self.layers]
        if kinds.count(OUTPUT) != 1 or kinds[-1] != OUTPUT:
            raise ValueError("model needs exactly one output layer, in last position")
        if self.layers[-1].units != self.class_count:
            raise ValueError(
                f"output layer has {self.layers[-1].units} units, expected {self.class_count}")
        if not any(l.modular for l in self.layers):
            raise ValueError("model needs at least one dense or conv hidden layer")
        layer_shapes(self)  # raises on incompatible chains

    @property
    def modular_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.modular]


def mlp_spec(input_dim: int, hidden: Sequence[int], classes: int, seed: int = 0) -> ModelSpec:
    layers = [LayerSpec(DENSE, int(u)) for u in hidden]
    layers.append(LayerSpec(OUTPUT, classes))
    return ModelSpec(tuple(layers), (int(input_dim),), classes, seed)


def cnn_spec(input_shape: Sequence[int], conv_channels: Sequence[int],
             hidden: Sequence[int], classes: int, seed: int = 0) -> ModelSpec:
    """conv3x3+pool blocks, then flatten and dense layers, then output."""
    layers: list[LayerSpec] = []
    for ch in conv_channels:
        layers.append(LayerSpec(CONV, int(ch)))
        layers.append(LayerSpec(POOL))
    layers.append(LayerSpec(FLATTEN))
    for u in hidden:
        layers.append(LayerSpec(DENSE, int(u)))
    layers.append(LayerSpec(OUTPUT, classes))
    return ModelSpec(tuple(layers), tuple(int(s) for s in input_shape), classes, seed)


def layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (excluding the batch dim), input first.

    Entry 0 is the input shape; entry i+1 is the output of layer i.
    """
    shapes = [spec.input_shape]
    cur = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if layer.kind == DENSE or layer.kind == OUTPUT:
            if len(cur) != 1:
                raise ValueError(
                    f"layer {i} ({layer.kind}) needs flat input, got shape {cur}")
            cur = (layer.units,)
        elif layer.kind == CONV:
            if len(cur) != 3:
                raise ValueError(
                    f"layer {i} (conv3x3) needs (C,H,W) input, got shape {cur}")
            cur = (layer.units, cur[1], cur[2])
        elif layer.kind == POOL:
            if len(cur) != 3 or cur[1] % 2 or cur[2] % 2:
                raise ValueError(
                    f"layer {i} (maxpool2x2) needs even (C,H,W) input, got shape {cur}")
            cur = (cur[0], cur[1] // 2, cur[2] // 2)
        elif layer.kind == FLATTEN:
            cur = (int(np.prod(cur)),)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        shapes.append(cur)
    return shapes


@dataclass
class ActivationBatch:
    """Post-ReLU channel-wise activations per modular layer, with labels.

    ``layers[k]`` is a [batch x units] tensor for the k-th modular layer
    (conv maps reduced by spatial averaging); ``layer_indices[k]`` is its
    index in the model spec.
    """
    layers: list[Tensor]
    labels: np.ndarray
    layer_indices: list[int] = field(default_factory=list)

    def values(self) -> list[np.ndarray]:
        return [t.data for t in self.layers]


class Model:
    """A built network: parameter tensors following a ModelSpec.

    Weights are stored [out, in] (dense/output) or [out, in, 3, 3] (conv);
    row j holds the incoming weights of unit j, so per-class module
    extraction slices rows.
    """

    def __init__(self, spec: ModelSpec, params: list[tuple[np.ndarray, np.ndarray] | None] | None = None):
        self.spec = spec
        self.shapes = layer_shapes(spec)
        if params is None:
            params = _init_params(spec, self.shapes)
        self.weights: list[Tensor | None] = []
        self.biases: list[Tensor | None] = []
        for layer_params in params:
            if layer_params is None:
                self.weights.append(None)
                self.biases.append(None)
            else:
                w, b = layer_params
                self.weights.append(ag.parameter(w))
                self.biases.append(ag.parameter(b))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend((w, b))
        return out

    def zero_grad(self) -> None:
        ag.zero_grads(self.parameters())

    def param_bytes(self) -> bytes:
        """Little-endian float64 bytes of all parameters in layer order."""
        chunks = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                chunks.append(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
                chunks.append(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
        return b"".join(chunks)

    # -- forward passes -------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        expect = self.spec.input_shape
        if x.shape[1:] != expect:
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match model input {expect}")

    def forward(self, x: Tensor | np.ndarray,
                hidden_masks: Sequence[np.ndarray] | None = None,
                record: bool = False):
        """Run the network; optionally record activations or zero masked units.

        Returns (logits, recorded) where recorded is a list of [batch x
        units] tensors per modular layer (empty when record is false).
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        if hidden_masks is not None:
            modular = self.spec.modular_indices
            if len(hidden_masks) != len(modular):
                raise ShapeError(
                    f"expected {len(modular)} hidden masks, got {len(hidden_masks)}")
        recorded: list[Tensor] = []
        mask_pos = 0
        logits = None
        for i, layer in enumerate(self.spec.layers):
            if layer.kind == DENSE:
                h = (x.matmul(self.weights[i].transpose()) + self.biases[i]).relu()
                h = self._apply_mask(h, hidden_masks, mask_pos, i)
                if record:
                    recorded.append(h)
                x = h
                mask_pos += 1
            elif layer.kind == CONV:
                u = ag.conv2d(x, self.weights[i], self.biases[i]).relu()
                u = self._apply_mask(u, hidden_masks, mask_pos, i)
                if record:
                    recorded.append(ag.spatial_mean(u))
                x = u
                mask_pos += 1
            elif layer.kind == POOL:
                x = ag.maxpool2x2(x)
            elif layer.kind == FLATTEN:
                x = x.reshape(x.shape[0], -1)
            else:  # OUTPUT
                logits = x.matmul(self.weights[i].transpose()) + self.biases[i]
        return logits, recorded

    def _apply_mask(self, h: Tensor, masks, mask_pos: int, layer_idx: int) -> Tensor:
        if masks is None:
            return h
        m = np.asarray(masks[mask_pos], dtype=np.float64)
        units = self.spec.layers[layer_idx].units
        if m.shape != (units,):
            raise ShapeError(
                f"mask for layer {layer_idx} has shape {m.shape}, expected ({units},)")
        if h.ndim == 4:
            return h * m[None, :, None, None]
        return h * m

    def forward_record(self, x, labels: np.ndarray):
        """Logits plus the ActivationBatch the modular losses consume."""
        labels = np.asarray(labels)
        logits, recorded = self.forward(x, record=True)
        acts = ActivationBatch(layers=recorded, labels=labels,
                               layer_indices=self.spec.modular_indices)
        return logits, acts

    def forward_masked(self, x, hidden_masks: Sequence[np.ndarray],
                       output_mask: np.ndarray) -> np.ndarray:
        """Forward pass with non-retained units forced to zero.

        Excluded output classes report the most negative finite float; the
        value is a sentinel for argmax, never an arithmetic operand.
        """
        output_mask = np.asarray(output_mask, dtype=bool)
        if output_mask.shape != (self.spec.class_count,):
            raise ShapeError(
                f"output mask shape {output_mask.shape}, expected ({self.spec.class_count},)")
        if not output_mask.any():
            raise ValueError("output mask selects no classes")
        logits, _ = self.forward(x, hidden_masks=hidden_masks)
        out = logits.data.copy()
        out[:, ~output_mask] = NEG_SENTINEL
        return out

    def predict(self, x) -> np.ndarray:
        logits, _ = self.forward(x)
        return np.argmax(logits.data, axis=1)


def _init_params(spec: ModelSpec, shapes) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Kaiming-uniform weights (fan-in, ReLU gain) and zero biases."""
    gen = streams.generator(spec.seed, streams.STREAM_INIT)
    params: list[tuple[np.ndarray, np.ndarray] | None] = []
    for i, layer in enumerate(spec.layers):
        if not layer.parametric:
            params.append(None)
            continue
        in_shape = shapes[i]
        if layer.kind == CONV:
            fan_in = in_shape[0] * 9
            w_shape = (layer.units, in_shape[0], 3, 3)
        else:
            fan_in = in_shape[0]
            w_shape = (layer.units, in_shape[0])
        bound = np.sqrt(6.0 / fan_in)
        w = gen.uniform(-bound, bound, size=w_shape)
        b = np.zeros(layer.units)
        params.append((w, b))
    return params


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def count_params(model: Model) -> tuple[list[int], int]:
    """Weight counts per layer and total; every numeric element counts."""
    per_layer = []
    for w, b in zip(model.weights, model.biases):
        per_layer.append(0 if w is None else w.data.size + b.data.size)
    return per_layer, sum(per_layer)


def count_flops(model: Model) -> tuple[list[int], int]:
    """Multiply-add FLOPs per layer and total.

    Dense: 2*in*out. Conv: 2*H_out*W_out*C_out*C_in*9. Pooling and
    activations are excluded.
    """
    widths = [l.units if l.parametric else 0 for l in model.spec.layers]
    return flops_for_widths(model.spec, widths)


def flops_for_widths(spec: ModelSpec, widths: Sequence[int]) -> tuple[list[int], int]:
    """FLOP tally for a model shaped like ``spec`` but with the given
    per-layer unit counts (used for composed sub-networks)."""
    per_layer = []
    cur = spec.input_shape
    for i, layer in enumerate(spec.layers):
        units = widths[i]
        if layer.kind in (DENSE, OUTPUT):
            per_layer.append(2 * cur[0] * units)
            cur = (units,)
        elif layer.kind == CONV:
            per_layer.append(2 * cur[1] * cur[2] * units * cur[0] * 9)
            cur = (units, cur[1], cur[2])
        elif layer.kind == POOL:
            per_layer.append(0)
            cur = (cur[0], cur[1] // 2, cur[2] // 2)
        else:  # FLATTEN
            per_layer.append(0)
            cur = (int(np.prod(cur)),)
    return per_layer, sum(per_layer)
