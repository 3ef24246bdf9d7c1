"""Bit-exact binary serialization of checkpoints and class modules.

File layout (integers little-endian unless noted):

    magic  b"MODA"
    u16    version (= 1)
    u32    header byte length
    bytes  UTF-8 header: one "key = value" line per field, fixed order
    [modules only] per modular layer: u32 count, then count u32 unit indices
    bytes  raw float64 parameter blocks, little-endian, in layer order

The header records the layer specs, shapes, seed, normalization, and a
64-bit FNV-1a digest of the parameter bytes, which is verified on load.
Save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .data import Normalization
from .nn import LayerSpec, Model, ModelSpec, OUTPUT

MAGIC = b"MODA"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    """Corrupt or mismatched checkpoint/module file."""


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


def model_digest(model: Model) -> int:
    return fnv1a64(model.param_bytes())


# -- header plumbing --------------------------------------------------------

def _spec_header_lines(spec: ModelSpec) -> list[str]:
    layers = ",".join(f"{l.kind}:{l.units}" for l in spec.layers)
    return [
        f"class_count = {spec.class_count}",
        f"input_shape = {','.join(str(s) for s in spec.input_shape)}",
        f"seed = {spec.seed}",
        f"layers = {layers}",
    ]


def _norm_header_lines(norm: Normalization | None) -> list[str]:
    if norm is None:
        return []
    return [f"norm.mean = {norm.mean!r}", f"norm.scale = {norm.scale!r}"]


def _parse_header(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed header line: {line!r}")
        fields[key] = value
    return fields


def _spec_from_fields(fields: dict[str, str]) -> ModelSpec:
    try:
        layers = []
        for item in fields["layers"].split(","):
            kind, _, units = item.partition(":")
            layers.append(LayerSpec(kind, int(units)))
        input_shape = tuple(int(s) for s in fields["input_shape"].split(","))
        return ModelSpec(tuple(layers), input_shape, int(fields["class_count"]),
                         int(fields["seed"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad model description in header: {exc}") from exc


def _norm_from_fields(fields: dict[str, str]) -> Normalization | None:
    if "norm.mean" not in fields:
        return None
    return Normalization(mean=float(fields["norm.mean"]),
                         scale=float(fields["norm.scale"]))


def _write_preamble(fh: BinaryIO, header_lines: list[str]) -> None:
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<H", VERSION))
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)


def _read_preamble(fh: BinaryIO, path) -> dict[str, str]:
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<I", fh.read(4))
    header = fh.read(hlen)
    if len(header) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    return _parse_header(header.decode("utf-8"))


def _read_exact(fh: BinaryIO, count: int, path, what: str) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise CheckpointError(f"{path}: truncated while reading {what}")
    return raw


def _f64_block(fh: BinaryIO, shape: tuple[int, ...], path, what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * 8, path, what)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(model: Model, path, normalization: Normalization | None = None) -> int:
    """Write the model; returns the parameter digest."""
    payload = model.param_bytes()
    digest = fnv1a64(payload)
    lines = ["format = checkpoint"]
    lines += _spec_header_lines(model.spec)
    lines += _norm_header_lines(normalization)
    lines.append(f"digest = 0x{digest:016x}")
    with open(path, "wb") as fh:
        _write_preamble(fh, lines)
        fh.write(payload)
    return digest


def load_checkpoint(path) -> tuple[Model, Normalization | None]:
    with open(path, "rb") as fh:
        fields = _read_preamble(fh, path)
        if fields.get("format") != "checkpoint":
            raise CheckpointError(f"{path}: not a checkpoint file")
        spec = _spec_from_fields(fields)
        params: list[tuple[np.ndarray, np.ndarray] | None] = []
        from .nn import layer_shapes
        shapes = layer_shapes(spec)
        for i, layer in enumerate(spec.layers):
            if not layer.parametric:
                params.append(None)
                continue
            if layer.kind == "conv3x3":
                w_shape = (layer.units, shapes[i][0], 3, 3)
            else:
                w_shape = (layer.units, shapes[i][0])
            w = _f64_block(fh, w_shape, path, f"layer {i} weights")
            b = _f64_block(fh, (layer.units,), path, f"layer {i} bias")
            params.append((w, b))
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    model = Model(spec, params=params)
    digest = model_digest(model)
    stored = int(fields.get("digest", "0x0"), 16)
    if digest != stored:
        raise CheckpointError(
            f"{path}: parameter digest 0x{digest:016x} does not match stored 0x{stored:016x}")
    return model, _norm_from_fields(fields)


# -- modules -----------------------------------------------------------------

def save_module(module, path) -> int:
    """Write a class module; returns its own parameter digest."""
    from .decompose import ModuleSpec
    assert isinstance(module, ModuleSpec)

    chunks = []
    for s in module.layers:
        chunks.append(np.ascontiguousarray(s.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(s.bias, dtype="<f8").tobytes())
    chunks.append(np.ascontiguousarray(module.output_weight, dtype="<f8").tobytes())
    chunks.append(np.ascontiguousarray(module.output_bias, dtype="<f8").tobytes())
    payload = b"".join(chunks)
    digest = fnv1a64(payload)

    lines = ["format = module"]
    lines += _spec_header_lines(module.source_spec)
    lines += [
        f"class_id = {module.class_id}",
        f"tau = {module.tau!r}",
        f"source_digest = 0x{module.source_digest:016x}",
        f"digest = 0x{digest:016x}",
    ]
    with open(path, "wb") as fh:
        _write_preamble(fh, lines)
        for s in module.layers:
            idx = np.ascontiguousarray(s.retained, dtype="<u4")
            fh.write(struct.pack("<I", idx.size))
            fh.write(idx.tobytes())
        fh.write(payload)
    return digest


def load_module(path):
    from .decompose import LayerSlice, ModuleSpec, input_index_map

    with open(path, "rb") as fh:
        fields = _read_preamble(fh, path)
        if fields.get("format") != "module":
            raise CheckpointError(f"{path}: not a module file")
        spec = _spec_from_fields(fields)
        class_id = int(fields["class_id"])
        tau = float(fields["tau"])
        source_digest = int(fields["source_digest"], 16)

        retained: dict[int, np.ndarray] = {}
        for i in spec.modular_indices:
            (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "index count"))
            raw = _read_exact(fh, count * 4, path, f"layer {i} indices")
            idx = np.frombuffer(raw, dtype="<u4").astype(np.int64)
            if count and (not np.all(np.diff(idx) > 0)
                          or idx[-1] >= spec.layers[i].units):
                raise CheckpointError(f"{path}: layer {i} index list invalid")
            retained[i] = idx

        in_map = input_index_map(spec, retained)
        slices: list[LayerSlice] = []
        payload_chunks = []
        for i, layer in enumerate(spec.layers):
            if not layer.modular:
                continue
            kept_out = retained[i].size
            kept_in = in_map[i].size
            if layer.kind == "conv3x3":
                w_shape = (kept_out, kept_in, 3, 3)
            else:
                w_shape = (kept_out, kept_in)
            w = _f64_block(fh, w_shape, path, f"layer {i} weights")
            b = _f64_block(fh, (kept_out,), path, f"layer {i} bias")
            payload_chunks += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
            slices.append(LayerSlice(layer_index=i, retained=retained[i],
                                     weight=w, bias=b))
        out_idx = in_map[len(spec.layers) - 1]
        out_w = _f64_block(fh, (1, out_idx.size), path, "output weights")
        out_b = _f64_block(fh, (1,), path, "output bias")
        payload_chunks += [out_w.astype("<f8").tobytes(), out_b.astype("<f8").tobytes()]
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after parameters")

    digest = fnv1a64(b"".join(payload_chunks))
    stored = int(fields["digest"], 16)
    if digest != stored:
        raise CheckpointError(
            f"{path}: parameter digest 0x{digest:016x} does not match stored 0x{stored:016x}")
    return ModuleSpec(class_id=class_id, source_spec=spec, layers=slices,
                      output_weight=out_w, output_bias=out_b, tau=tau,
                      source_digest=source_digest, seed=spec.seed)
