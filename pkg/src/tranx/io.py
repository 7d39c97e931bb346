"""Binary tensor files, checkpoints and atomic writes.

Tensor file (little-endian):

    offset 0   magic  b"TXA1"
    offset 4   u16    version (1)
    offset 6   u32    rows
    offset 10  u32    cols
    offset 14  f32    rows * cols values, row-major

Checkpoint container:

    offset 0   magic  b"TXCK"
    offset 4   u16    version (1)
    offset 6   u32    block count
    then per block:  u16 name length, utf-8 name, u32 rows, u32 cols,
                     rows * cols f32 values (vectors are stored as 1 x n)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

TENSOR_MAGIC = b"TXA1"
CHECKPOINT_MAGIC = b"TXCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_CK_HEADER = struct.Struct("<4sHI")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling then rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _to_f32(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{what}: refusing to write non-finite values")
    if np.any(np.abs(m) > np.finfo(np.float32).max):
        raise ContractError(f"{what}: values exceed float32 range")
    return m.astype("<f4")


def encode_tensor(matrix) -> bytes:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ContractError(f"tensor files hold 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    return _HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, rows, cols) + _to_f32(m, "tensor").tobytes()


def decode_tensor(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError(path, len(data), f"truncated header ({len(data)} of {_HEADER.size} bytes)")
    magic, version, rows, cols = _HEADER.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    expected = _HEADER.size + rows * cols * 4
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"payload length {len(data) - _HEADER.size} != rows*cols*4 = {rows * cols * 4}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)


def write_tensor(path, matrix) -> None:
    atomic_write_bytes(path, encode_tensor(matrix))


def read_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContractError(f"{path}: cannot read tensor file ({exc.strerror})") from exc
    return decode_tensor(data, path)


def write_checkpoint(path, params: dict) -> None:
    parts = [_CK_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        m = arr.reshape(1, -1) if arr.ndim == 1 else arr
        if m.ndim != 2:
            raise ContractError(f"checkpoint block '{name}' must be 1-D or 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *m.shape))
        parts.append(_to_f32(m, f"checkpoint block '{name}'").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_checkpoint(path) -> dict:
    """Blocks come back as float64; 1 x n blocks are returned as vectors."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContractError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if len(data) < _CK_HEADER.size:
        raise FormatError(path, len(data), "truncated checkpoint header")
    magic, version, count = _CK_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    pos = _CK_HEADER.size
    out = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError(path, pos, "truncated block name length")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + 8 > len(data):
            raise FormatError(path, pos, "truncated block header")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        size = rows * cols * 4
        if pos + size > len(data):
            raise FormatError(path, pos, f"truncated payload for block '{name}'")
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        out[name] = arr.astype(np.float64).reshape(-1) if rows == 1 else arr.astype(np.float64)
        pos += size
    if pos != len(data):
        raise FormatError(path, pos, "trailing bytes after last block")
    return out
