# core/checkpoint.py
"""
Flat binary tensor files:

  "STYF" | version u32 | count u32
  per tensor: name_len u32 | utf-8 name | rank u32 | dims u32[rank] | f32 LE payload
  crc32 u32 over every preceding byte, header included; a damaged header fails the CRC
  before any field is parsed

All integers little-endian. A `<stem>.json` sidecar records what the tensors are.
"""
from __future__ import annotations

import logging
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import ModelConfig
from .errors import IntegrityError, MissingArtifactError
from .json_utils import dump_json, load_json
from .models import new_comparator, new_discriminator, new_generator, new_language_model
from .transformer import named_parameters

logger = logging.getLogger(__name__)

MAGIC = b"STYF"
FORMAT_VERSION = 1
KINDS = ("lm", "comparator", "generator", "discriminator")


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_tensors(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 16:
        raise IntegrityError("checkpoint too short")
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise IntegrityError("checkpoint CRC32 mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise IntegrityError("not a STYF checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in out:
            raise IntegrityError(f"duplicate tensor name {name}")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after last tensor")
    return out


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: Path, model: Any, kind: str, config: ModelConfig,
                    meta: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write the model's parameters and its sidecar; returns the checkpoint path.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind: {kind}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: p.data for name, p in named_parameters(model).items()}
    path.write_bytes(encode_tensors(tensors))
    dump_json({"kind": kind, "model": config.model_dump(), **(meta or {})}, sidecar_path(path))
    logger.info("saved %s checkpoint (%d tensors) to %s", kind, len(tensors), path)
    return path


def load_into(model: Any, tensors: Dict[str, np.ndarray]) -> Any:
    params = named_parameters(model)
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))[:5]
        extra = sorted(set(tensors) - set(params))[:5]
        raise IntegrityError(f"checkpoint tensors do not match model (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise IntegrityError(f"{name}: shape {tensors[name].shape} != {p.data.shape}")
        p.data[...] = tensors[name]
    return model


def _skeleton(kind: str, config: ModelConfig) -> Any:
    if kind == "lm":
        return new_language_model(config, seed=0)
    if kind == "comparator":
        return new_comparator(config, seed=0)
    if kind == "discriminator":
        return new_discriminator(config, seed=0)
    return new_generator(config, config.variant, seed=0)


def load_checkpoint(path: Path, expect: Optional[str] = None) -> Tuple[Any, ModelConfig, Dict[str, Any]]:
    """
    Returns (model, config, sidecar) after CRC and shape verification.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    if not side.exists():
        raise MissingArtifactError(f"checkpoint sidecar not found: {side}")
    meta = load_json(side)
    kind = meta.get("kind")
    if kind not in KINDS:
        raise IntegrityError(f"{side}: unknown checkpoint kind {kind!r}")
    if expect is not None and kind != expect:
        raise IntegrityError(f"{path} holds a {kind} checkpoint, expected {expect}")
    config = ModelConfig(**meta["model"])
    model = load_into(_skeleton(kind, config), decode_tensors(path.read_bytes()))
    return model, config, meta
