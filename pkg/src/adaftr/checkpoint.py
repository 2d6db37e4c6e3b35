"""Binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"ADFT" | version
    repeated: name_len | name (utf-8) | rank | dims[rank] | float64 LE data
    final:    name_len | "__config__" | text_len | key=value text (utf-8)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, check_shapes
from .numcore import DimensionError

MAGIC = b"ADFT"
VERSION = 1
META_NAME = "__config__"


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(params: ModelParams, config: ModelConfig, extra: dict[str, str] | None = None) -> bytes:
    parts = [MAGIC, _u32(VERSION)]
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(arr.tobytes(order="C"))
    items = dict(config.to_items())
    for k, v in (extra or {}).items():
        items[k] = v
    text = "".join(f"{k}={v}\n" for k, v in sorted(items.items())).encode("utf-8")
    raw = META_NAME.encode("utf-8")
    parts += [_u32(len(raw)), raw, _u32(len(text)), text]
    return b"".join(parts)


def save_checkpoint(params: ModelParams, config: ModelConfig, path, extra=None) -> None:
    path = Path(path)
    data = encode(params, config, extra)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes, source: str = "<bytes>") -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    r = _Reader(data, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    arrays = {}
    while True:
        name = r.take(r.u32()).decode("utf-8")
        if name == META_NAME:
            text = r.take(r.u32()).decode("utf-8")
            break
        if name in arrays:
            raise CheckpointError(f"{source}: duplicate entry '{name}'")
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: trailing bytes after metadata")
    items = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            items[k] = v
    config = ModelConfig.from_items(items)
    params = ModelParams(arrays)
    try:
        check_shapes(params, config)
    except DimensionError as exc:
        raise CheckpointError(f"{source}: shape inconsistency: {exc}") from None
    return params, config, items


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Read a checkpoint; returns ``(params, model_config, metadata_items)``.

    With ``expected`` the stored arrays must also fit that configuration.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    params, config, items = decode(data, str(path))
    if expected is not None:
        try:
            check_shapes(params, expected)
        except DimensionError as exc:
            raise CheckpointError(f"{path}: shape inconsistency with requested config: {exc}") from None
    return params, config, items
