import struct
import zlib

import numpy as np
import pytest

from dhag import checkpoint, core
from dhag.core import ArchConfig, TrainConfig
from dhag.exceptions import CheckpointError


@pytest.fixture
def model():
    config = TrainConfig(epochs=2, batch_size=32, n_augment=4, seed=3)
    m = core.build_model(5, config, ArchConfig(latent_dim=6, encoder_hidden=(7,), perturbator_channels=(5,)))
    core.fit(m, np.random.default_rng(0).normal(size=(64, 5)), config)
    return m


def test_round_trip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    extra = {"norm.shift": np.arange(5.0), "norm.scale": np.ones(5)}
    checkpoint.save_checkpoint(path, model, extra, {"note": "x", "seed": 3})
    loaded, arrays, meta = checkpoint.load_checkpoint(path)
    assert meta == {"note": "x", "seed": 3}
    assert set(arrays) == set(extra) and np.array_equal(arrays["norm.shift"], extra["norm.shift"])
    assert loaded.architecture() == model.architecture()
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    x = np.random.default_rng(1).normal(size=(100, 5))
    assert core.anomaly_score(model, x).tobytes() == core.anomaly_score(loaded, x).tobytes()


def test_serialisation_is_deterministic(model):
    assert checkpoint.to_bytes(model, {"a": np.ones(2)}, {"k": 1}) == checkpoint.to_bytes(model, {"a": np.ones(2)}, {"k": 1})


def test_bad_magic(model):
    buf = bytearray(checkpoint.to_bytes(model))
    buf[0:8] = b"NOTACKPT"
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(bytes(buf))


def test_corruption_reports_format_version(model):
    buf = bytearray(checkpoint.to_bytes(model))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="format version 1"):
        checkpoint.from_bytes(bytes(buf))


def test_unknown_version(model):
    buf = bytearray(checkpoint.to_bytes(model))
    buf[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint.from_bytes(bytes(buf))


def test_truncated(model):
    buf = checkpoint.to_bytes(model)[:-40]
    buf = buf + struct.pack("<I", zlib.crc32(buf))
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.from_bytes(buf)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(tmp_path / "none.ckpt")
