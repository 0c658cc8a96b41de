import struct

import numpy as np
import pytest

from dcvit.container import (
    BadMagicError,
    FormatError,
    load_model,
    read_container,
    save_model,
    write_container,
)
from dcvit.encoder import forward_logits, init_model

from conftest import random_batch, tiny_config


def test_header_layout(tmp_path):
    path = tmp_path / "t.dcvt"
    write_container(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2)}, {"k": 1})
    buf = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", buf)
    assert (magic, version) == (b"DCVT", 1)
    assert len(buf) == 16 + hlen + 4 * 8
    tensors, meta = read_container(path)
    np.testing.assert_array_equal(tensors["a"], np.arange(6).reshape(2, 3))
    assert tensors["a"].dtype == np.float32
    assert meta == {"k": 1}
    # blobs are little-endian f4 in insertion order
    assert np.frombuffer(buf[16 + hlen:16 + hlen + 24], "<f4").tolist() == list(range(6))


def test_scalar_tensor_roundtrip(tmp_path):
    write_container(tmp_path / "s.dcvt", {"alpha": np.float32(0.25)})
    tensors, meta = read_container(tmp_path / "s.dcvt")
    assert tensors["alpha"].shape == () and tensors["alpha"] == np.float32(0.25)
    assert meta == {}


@pytest.mark.parametrize("kw", [{}, dict(block_kind="mcvit", channel_layers=()), dict(use_cls_per_channel=True, g_sp="cls")])
def test_model_roundtrip_bit_identical(tmp_path, kw):
    model = init_model(tiny_config(**kw), seed=3)
    path = tmp_path / "m.dcvt"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config
    b = random_batch()
    assert forward_logits(b, back).data.tobytes() == forward_logits(b, model).data.tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "m.dcvt"
    save_model(init_model(tiny_config()), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_model(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.dcvt"
    save_model(init_model(tiny_config()), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="past end"):
        load_model(path)
    path.write_bytes(b"DC")
    with pytest.raises(FormatError):
        read_container(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "v.dcvt"
    path.write_bytes(struct.pack("<4sIQ", b"DCVT", 2, 2) + b"{}")
    with pytest.raises(FormatError, match="version"):
        read_container(path)


def test_tensors_must_match_config(tmp_path):
    model = init_model(tiny_config())
    tensors = {k: v for k, v in model.params.items() if k != "head.b"}
    path = tmp_path / "m.dcvt"
    write_container(path, tensors, {"config": model.config.to_dict()})
    with pytest.raises(FormatError, match="head.b"):
        load_model(path)


def test_missing_config(tmp_path):
    write_container(tmp_path / "n.dcvt", {"a": np.zeros(1)})
    with pytest.raises(FormatError, match="config"):
        load_model(tmp_path / "n.dcvt")
