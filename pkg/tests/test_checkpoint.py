import struct
import zlib

import numpy as np
import pytest

from core.checkpoint import (
    MAGIC, decode_tensors, encode_tensors, load_checkpoint, load_into, save_checkpoint, sidecar_path,
)
from core.errors import IntegrityError, MissingArtifactError
from core.models import new_comparator
from core.transformer import named_parameters


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


@pytest.fixture
def models(lm, comparator, discriminator, make_bundle):
    return {"lm": lm, "comparator": comparator, "discriminator": discriminator, "generator": make_bundle("C")}


@pytest.mark.parametrize("kind", ["lm", "comparator", "discriminator", "generator"])
def test_saved_weights_load_back_bit_for_bit(tmp_path, tiny_config, models, kind):
    model = models[kind]
    config = model.config if kind == "generator" else tiny_config
    path = save_checkpoint(tmp_path / f"{kind}.styf", model, kind, config, meta={"step": 7})
    loaded, loaded_config, meta = load_checkpoint(path, expect=kind)
    assert loaded_config == config
    assert meta["kind"] == kind and meta["step"] == 7
    original = named_parameters(model)
    restored = named_parameters(loaded)
    assert list(original) == list(restored)
    for name in original:
        assert original[name].data.tobytes() == restored[name].data.tobytes()


def test_file_header_layout(tmp_path, lm, tiny_config):
    path = save_checkpoint(tmp_path / "lm.styf", lm, "lm", tiny_config)
    data = path.read_bytes()
    assert data[:4] == MAGIC
    version, count = struct.unpack("<II", data[4:12])
    assert version == 1
    assert count == len(named_parameters(lm))
    name_len = struct.unpack("<I", data[12:16])[0]
    assert data[16:16 + name_len] == b"embeddings.tokens"
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4]) & 0xFFFFFFFF
    assert sidecar_path(path).name == "lm.json"


def test_single_flipped_byte_is_detected(tmp_path, lm, tiny_config):
    path = save_checkpoint(tmp_path / "lm.styf", lm, "lm", tiny_config)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


@pytest.mark.parametrize("where", ["magic", "count", "name", "payload"])
def test_crc_covers_header_and_payload(where):
    data = bytearray(encode_tensors({"w": np.ones((2, 3))}))
    offset = {"magic": 0, "count": 8, "name": 16, "payload": len(data) - 8}[where]
    data[offset] ^= 0x01
    with pytest.raises(IntegrityError, match="CRC32"):
        decode_tensors(bytes(data))


def test_truncated_file_is_detected():
    data = encode_tensors({"w": np.ones((2, 3))})
    for cut in (3, 10, len(data) - 1):
        with pytest.raises(IntegrityError):
            decode_tensors(data[:cut])


def test_bad_magic_version_and_trailing_bytes():
    good = encode_tensors({"w": np.ones(2)})[:-4]
    with pytest.raises(IntegrityError, match="not a STYF"):
        decode_tensors(_with_crc(b"NOPE" + good[4:]))
    with pytest.raises(IntegrityError, match="version"):
        decode_tensors(_with_crc(MAGIC + struct.pack("<I", 99) + good[8:]))
    with pytest.raises(IntegrityError, match="trailing"):
        decode_tensors(_with_crc(good + b"\x00\x00\x00\x00"))


def test_tensors_decode_to_float32_with_shape():
    arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "scalar": np.array(2.5)}
    out = decode_tensors(encode_tensors(arrays))
    assert out["a"].dtype == np.float32 and out["a"].shape == (2, 3)
    assert out["scalar"].shape == () and out["scalar"] == 2.5


def test_missing_checkpoint_and_sidecar(tmp_path, lm, tiny_config):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nothing.styf")
    path = save_checkpoint(tmp_path / "lm.styf", lm, "lm", tiny_config)
    sidecar_path(path).unlink()
    with pytest.raises(MissingArtifactError):
        load_checkpoint(path)


def test_wrong_kind_is_rejected(tmp_path, lm, tiny_config):
    path = save_checkpoint(tmp_path / "lm.styf", lm, "lm", tiny_config)
    with pytest.raises(IntegrityError):
        load_checkpoint(path, expect="comparator")


def test_load_into_checks_names_and_shapes(lm, tiny_config):
    tensors = {name: p.data for name, p in named_parameters(lm).items()}
    with pytest.raises(IntegrityError):
        load_into(new_comparator(tiny_config, seed=0), tensors)
    tensors["ln_f.gamma"] = np.ones(3, dtype=np.float32)
    with pytest.raises(IntegrityError):
        load_into(lm, tensors)
