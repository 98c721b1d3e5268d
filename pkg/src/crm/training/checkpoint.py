"""Binary checkpoint format.

Layout (little-endian)::

    b"CRM1" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | float32 data
    u64 footer = number of bytes before the footer

Configuration and step counter travel as two extra tensors: the config JSON
as one float per byte and the step as a single float.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..decoder import CRM, CRMConfig
from ..diffcore import Tensor

MAGIC = b"CRM1"
VERSION = 1
META_CONFIG = "__meta__.config_json"
META_STEP = "__meta__.step"
_MAX_EXACT_STEP = 2**24  # largest step a float32 stores exactly


class CheckpointError(ValueError):
    pass


class InvalidFormatError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    @classmethod
    def from_model(cls, model: CRM, step: int = 0, train_config: dict | None = None) -> "Checkpoint":
        cfg = {"model": model.config.to_dict()}
        if train_config is not None:
            cfg["train"] = train_config
        params = {k: np.array(v.data, dtype=np.float32, copy=True) for k, v in model.named_parameters()}
        return cls(params, cfg, int(step))

    def model_config(self) -> CRMConfig:
        return CRMConfig.from_dict(self.config["model"])

    def to_model(self) -> CRM:
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return CRM(self.model_config(), params)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if not 0 <= ckpt.step < _MAX_EXACT_STEP:
        raise ValueError(f"step {ckpt.step} does not fit the float32 step slot")
    cfg_bytes = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    tensors = [(k, np.asarray(ckpt.params[k], dtype=np.float32)) for k in sorted(ckpt.params)]
    tensors.append((META_CONFIG, np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float32)))
    tensors.append((META_STEP, np.array([ckpt.step], dtype=np.float32)))
    out = bytearray(MAGIC)
    out += struct.pack("<II", ckpt.version, len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<Q", len(out))
    return bytes(out)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise InvalidFormatError("invalid format: bad magic bytes")
    if len(buf) < 12:
        raise TruncatedCheckpointError("truncated: header incomplete")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (expected {VERSION})")
    if len(buf) < 20:
        raise TruncatedCheckpointError("truncated: missing footer")
    (footer,) = struct.unpack_from("<Q", buf, len(buf) - 8)
    if footer != len(buf) - 8:
        raise TruncatedCheckpointError(f"truncated: footer records {footer} bytes, file holds {len(buf) - 8}")
    end = len(buf) - 8
    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise TruncatedCheckpointError("truncated: tensor table runs past the end")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise InvalidFormatError("invalid format: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        if name in arrays:
            raise InvalidFormatError(f"invalid format: duplicate tensor {name!r}")
        arrays[name] = data
    if pos != end:
        raise InvalidFormatError("invalid format: trailing bytes after the tensor table")
    cfg = {}
    if META_CONFIG in arrays:
        raw = arrays.pop(META_CONFIG)
        cfg = json.loads(raw.astype(np.uint8).tobytes().decode("utf-8"))
    step = int(arrays.pop(META_STEP)[0]) if META_STEP in arrays else 0
    return Checkpoint(arrays, cfg, step, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
