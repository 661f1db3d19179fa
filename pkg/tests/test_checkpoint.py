import struct

import numpy as np
import pytest

from fedcare import checkpoint
from fedcare.errors import CheckpointError
from fedcare.generator import GenLossConfig, GeneratorNet
from fedcare.models import build_classifier


def test_classifier_roundtrip_is_bit_exact(tmp_path, trained_desk_model):
    checkpoint.save(tmp_path / "m.fckp", trained_desk_model)
    back = checkpoint.load(tmp_path / "m.fckp")
    assert back.params == trained_desk_model.params
    assert back.split_index == trained_desk_model.split_index
    assert back.digest() == trained_desk_model.digest()
    checkpoint.save(tmp_path / "m2.fckp", back)
    assert (tmp_path / "m.fckp").read_bytes() == (tmp_path / "m2.fckp").read_bytes()


def test_batch_norm_generator_roundtrip(tmp_path):
    cfg = GenLossConfig(latent_dim=4, norm_kind="batch-norm", block_channels=(4,), h0_channels=4)
    gen = GeneratorNet.build((1, 6, 6), 3, cfg, seed=2)
    idx = next(iter(gen.net.buffers))
    rng = np.random.default_rng(0)
    buffers = {idx: (rng.normal(size=4), rng.uniform(size=4))}
    gen = gen._replace(net=gen.net.replace(buffers=buffers))
    checkpoint.save(tmp_path / "g.fckp", gen)
    back = checkpoint.load(tmp_path / "g.fckp")
    assert isinstance(back, GeneratorNet) and back.meta() == gen.meta()
    assert back.net.params == gen.net.params
    for a, b in zip(back.net.buffers[idx], buffers[idx]):
        assert np.array_equal(a, b)
    z = rng.normal(size=(5, 4))
    assert np.array_equal(back.generate(z, [0, 1, 2, 0, 1]), gen.generate(z, [0, 1, 2, 0, 1]))


def test_corrupt_header_and_payload_are_rejected(tmp_path):
    model = build_classifier({"kind": "mlp", "hidden": [3]}, (4,), 2, seed=0)
    raw = bytearray(checkpoint.encode(model))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + bytes(raw[4:]))
    flipped = bytearray(raw)
    flipped[-40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.decode(bytes(flipped))
    with pytest.raises(CheckpointError, match="too short"):
        checkpoint.decode(bytes(raw[:10]))


def test_version_mismatch(tmp_path):
    model = build_classifier({"kind": "mlp", "hidden": [3]}, (4,), 2, seed=0)
    raw = bytearray(checkpoint.encode(model))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        checkpoint.decode(bytes(raw))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "absent.fckp")
