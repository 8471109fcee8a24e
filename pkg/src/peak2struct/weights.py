"""ETW1 weight container.

Layout (little-endian)::

    b"ETWB"
    u32 version (= 1)
    u32 config length, config as UTF-8 JSON (sorted keys)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0=f64, 1=f32),
                u8 rank, u32 dims[rank], row-major payload
    u32 CRC-32 of every byte after the magic
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from typing import BinaryIO

import numpy as np
import torch

from .model import ConfigError, ETConfig, ETModel

MAGIC = b"ETWB"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class WeightFileError(ValueError):
    pass


class ChecksumError(WeightFileError):
    pass


def encode(config_json: str, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    body = io.BytesIO()
    body.write(struct.pack("<I", VERSION))
    cfg = config_json.encode("utf-8")
    body.write(struct.pack("<I", len(cfg)))
    body.write(cfg)
    body.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise WeightFileError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        body.write(struct.pack("<H", len(raw)))
        body.write(raw)
        body.write(struct.pack("<BB", code, arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(arr.astype(_DTYPES[code], copy=False).tobytes(order="C"))
    payload = body.getvalue()
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def save_weights(model: ETModel, sink: str | os.PathLike | BinaryIO) -> None:
    tensors = [(name, t.detach().cpu().numpy()) for name, t in model.state_dict().items()]
    data = encode(model.config.to_json(), tensors)
    if hasattr(sink, "write"):
        sink.write(data)
        return
    tmp = f"{os.fspath(sink)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, sink)


def _read_all(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def decode(data: bytes) -> tuple[ETConfig, list[tuple[str, np.ndarray]]]:
    if data[:4] != MAGIC:
        raise WeightFileError("not an ETW1 weight file (bad magic)")
    if len(data) < 12:
        raise ChecksumError("weight file truncated")
    payload, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("weight file checksum mismatch (corrupt or truncated)")
    buf = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    (n,) = take("<I")
    config = ETConfig.from_json(bytes(buf[pos : pos + n]).decode("utf-8"))
    pos += n
    (count,) = take("<I")
    tensors = []
    for _ in range(count):
        (ln,) = take("<H")
        name = bytes(buf[pos : pos + ln]).decode("utf-8")
        pos += ln
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise WeightFileError(f"unknown dtype code {code} for {name}")
        dims = take(f"<{rank}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(buf[pos : pos + nbytes]), dtype=dt).reshape(dims)
        pos += nbytes
        tensors.append((name, arr))
    if pos != len(payload):
        raise WeightFileError("trailing bytes after last tensor")
    return config, tensors


def load_weights(source) -> ETModel:
    config, tensors = decode(_read_all(source))
    dtype = torch.float32 if tensors and tensors[0][1].dtype == np.float32 else torch.float64
    model = ETModel(config, dtype=dtype)
    state = model.state_dict()
    if [name for name, _ in tensors] != list(state):
        raise ConfigError("tensor names do not match the architecture in the embedded config")
    new_state = {}
    for name, arr in tensors:
        if tuple(arr.shape) != tuple(state[name].shape):
            raise ConfigError(f"tensor {name} has shape {arr.shape}, config implies {tuple(state[name].shape)}")
        new_state[name] = torch.from_numpy(arr.copy()).to(dtype)
    model.load_state_dict(new_state)
    return model
