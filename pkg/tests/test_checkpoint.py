import json
import struct

import numpy as np
import pytest

from conftest import small_cnn
from ctt.attacks import AttackSpec, run_attack
from ctt.checkpoint import (CheckpointError, CheckpointTruncatedError, load_adversarial,
                            load_checkpoint, read_container, save_adversarial, save_checkpoint)
from ctt.core import generate_key
from ctt.model import Model, preset


@pytest.fixture
def saved(tmp_path):
    model = Model(preset("lenet5"), seed=4)
    model.metrics = {"test_accuracy": 0.5}
    key = generate_key(model.spec, 0.01, seed=3, threshold=2e-4)
    path = save_checkpoint(tmp_path / "m.cttm", model, key, extra={"note": "x"})
    return path, model, key


def test_round_trip_is_bit_identical(saved):
    path, model, key = saved
    loaded, lkey, header = load_checkpoint(path)
    assert loaded.spec == model.spec
    for name, arr in model.params.items():
        assert loaded.params[name].tobytes() == arr.tobytes()
    assert lkey.layers == key.layers
    for layer in key.layers:
        assert np.array_equal(lkey.masks[layer], key.masks[layer])
        assert lkey.thresholds[layer] == key.thresholds[layer]
    assert (lkey.beta, lkey.seed) == (key.beta, key.seed)
    assert header["extra"] == {"note": "x"} and loaded.metrics["test_accuracy"] == 0.5


def test_header_layout(saved):
    path = saved[0]
    raw = path.read_bytes()
    magic, version, head_len = struct.unpack_from("<4sIQ", raw)
    assert magic == b"CTTM" and version == 1
    header = json.loads(raw[16:16 + head_len])
    entry = header["tensors"][0]
    assert set(entry) == {"name", "shape", "offset", "nbytes"}
    assert header["key"]["layers"][0]["indices"] == sorted(header["key"]["layers"][0]["indices"])


def test_model_without_key(tmp_path):
    model = small_cnn(dtype=np.float32)
    path = save_checkpoint(tmp_path / "plain.cttm", model)
    loaded, key, _ = load_checkpoint(path)
    assert key is None and loaded.spec == model.spec


def test_corrupted_magic(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncated_mid_blob_names_lengths(saved):
    path = saved[0]
    raw = path.read_bytes()
    path.write_bytes(raw[:-1000])
    with pytest.raises(CheckpointTruncatedError) as err:
        load_checkpoint(path)
    msg = str(err.value)
    assert "expected" in msg and "got" in msg


def test_truncated_header(saved):
    path = saved[0]
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointTruncatedError):
        read_container(path)


def test_trailing_bytes_disagree_with_manifest(saved):
    path = saved[0]
    path.write_bytes(path.read_bytes() + b"\0" * 8)
    with pytest.raises(CheckpointError, match="manifest"):
        read_container(path)


def test_adversarial_round_trip(tmp_path, rng):
    model = small_cnn(dtype=np.float32)
    x = rng.random((6, 1, 6, 6), dtype=np.float32)
    y = rng.integers(0, 3, 6)
    batch = run_attack(model, x, y, AttackSpec("fgsm", eps=0.2))
    path = save_adversarial(tmp_path / "a.cttm", batch)
    loaded, header = load_adversarial(path)
    assert np.array_equal(loaded.perturbed, batch.perturbed)
    assert np.array_equal(loaded.success, batch.success)
    assert np.array_equal(loaded.labels, batch.labels)
    assert header["attack"]["method"] == "fgsm"
    with pytest.raises(CheckpointError, match="not a model"):
        load_checkpoint(path)
