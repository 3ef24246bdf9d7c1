import numpy as np
import pytest

from moda import (build_model, compose, decompose_all, load_checkpoint,
                  load_module, save_checkpoint, save_module)
from moda.data import Normalization
from moda.nn import cnn_spec, mlp_spec
from moda.serialize import CheckpointError, fnv1a64, model_digest


def test_fnv1a64_known_vectors():
    # standard FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_checkpoint_roundtrip_bit_exact(tmp_path, small_trained):
    p1 = tmp_path / "a.moda"
    p2 = tmp_path / "b.moda"
    save_checkpoint(small_trained, p1, normalization=Normalization(0.0, 255.0))
    model, norm = load_checkpoint(p1)
    assert norm == Normalization(0.0, 255.0)
    assert model.param_bytes() == small_trained.param_bytes()
    assert model.spec == small_trained.spec
    save_checkpoint(model, p2, normalization=norm)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_digest_detects_corruption(tmp_path, small_trained):
    path = tmp_path / "c.moda"
    save_checkpoint(small_trained, path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF  # flip a byte inside the parameter payload
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path, small_trained):
    path = tmp_path / "d.moda"
    save_checkpoint(small_trained, path)
    raw = bytearray(path.read_bytes())
    bad = bytearray(raw)
    bad[:4] = b"NOPE"
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    bad = bytearray(raw)
    bad[4] = 99
    path.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncation(tmp_path, small_trained):
    path = tmp_path / "e.moda"
    save_checkpoint(small_trained, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_module_roundtrip_bit_exact(tmp_path, trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, _ = blobs_data
    modules = decompose_all(model, train_ds, 0.9)
    p1 = tmp_path / "m.moda"
    p2 = tmp_path / "m2.moda"
    save_module(modules[1], p1)
    loaded = load_module(p1)
    assert loaded.class_id == 1
    assert loaded.tau == 0.9
    assert loaded.source_digest == model_digest(model)
    for a, b in zip(loaded.layers, modules[1].layers):
        assert np.array_equal(a.retained, b.retained)
        assert np.array_equal(a.weight, b.weight)
        assert np.array_equal(a.bias, b.bias)
    assert np.array_equal(loaded.output_weight, modules[1].output_weight)
    save_module(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_module_reattaches_iff_digest_matches(tmp_path, trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, _ = blobs_data
    modules = decompose_all(model, train_ds, 0.9)
    paths = []
    for m in modules[:2]:
        p = tmp_path / f"c{m.class_id}.moda"
        save_module(m, p)
        paths.append(p)
    loaded = [load_module(p) for p in paths]
    cm = compose(loaded, model)  # digests match: composes fine
    assert cm.class_order == [0, 1]
    other = build_model(mlp_spec(2, [32, 32], 4, seed=123))
    with pytest.raises(ValueError, match="different model"):
        compose(loaded, other)


def test_module_digest_detects_corruption(tmp_path, trained_blobs, blobs_data):
    model, _ = trained_blobs
    train_ds, _ = blobs_data
    module = decompose_all(model, train_ds, 0.9)[0]
    path = tmp_path / "m.moda"
    save_module(module, path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_module(path)


def test_cnn_checkpoint_roundtrip(tmp_path):
    model = build_model(cnn_spec((1, 8, 8), [4, 6], [10], 3, seed=6))
    path = tmp_path / "cnn.moda"
    save_checkpoint(model, path)
    loaded, norm = load_checkpoint(path)
    assert norm is None
    assert loaded.param_bytes() == model.param_bytes()
    assert loaded.spec.layers == model.spec.layers


def test_loaded_model_behaves_identically(tmp_path, small_trained, blobs_data):
    _, test_ds = blobs_data
    path = tmp_path / "same.moda"
    save_checkpoint(small_trained, path)
    loaded, _ = load_checkpoint(path)
    a = small_trained.predict(test_ds.inputs[:50])
    b = loaded.predict(test_ds.inputs[:50])
    assert np.array_equal(a, b)
