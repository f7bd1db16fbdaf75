"""Binary checkpoint format and plain-text config files.

Checkpoint layout (little-endian throughout):

    magic   4 bytes  b"ORST"
    version u32
    count   u32                       number of records
    records: for each --
        name_len u32, name utf-8
        dtype    u8   (see _DTYPE_CODES)
        ndim     u8
        dims     ndim * u64
        nbytes   u64
        raw      nbytes bytes
    crc32   u32   over everything after the magic

Non-array metadata (labels, config snapshot, RNG state) rides along as
uint8 records holding utf-8 JSON under reserved "meta." names.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "save_meta",
    "load_meta",
    "parse_config_text",
    "format_config_text",
    "load_config_file",
]

MAGIC = b"ORST"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.int32): 4,
    np.dtype(np.uint32): 5,
    np.dtype(np.uint64): 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    """Raised for malformed, truncated, or corrupted checkpoint files."""


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named arrays (plus optional JSON-able metadata) to `path`."""
    records = dict(arrays)
    if meta is not None:
        for key, value in meta.items():
            payload = json.dumps(value).encode("utf-8")
            records[f"meta.{key}"] = np.frombuffer(payload, dtype=np.uint8)
    body = bytearray()
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(records))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for '{name}'")
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded)) + encoded
        body += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        raw = arr.tobytes()
        body += struct.pack("<Q", len(raw)) + raw
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + bytes(body) + struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays, meta). Verifies magic and CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, (crc_stored,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupted")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CheckpointError(f"{path}: truncated record")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = take("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = take(f"<{ndim}Q") if ndim else ()
        (nbytes,) = take("<Q")
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated array data for '{name}'")
        arr = np.frombuffer(body[off:off + nbytes],
                            dtype=_CODE_DTYPES[code]).reshape(shape).copy()
        off += nbytes
        if name.startswith("meta."):
            meta[name[5:]] = json.loads(arr.tobytes().decode("utf-8"))
        else:
            arrays[name] = arr
    return arrays, meta


def save_meta(path, meta: dict) -> None:
    save_checkpoint(path, {}, meta=meta)


def load_meta(path) -> dict:
    return load_checkpoint(path)[1]


def _coerce(value: str):
    text = value.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if "," in text:
        return tuple(_coerce(part) for part in text.split(","))
    return text


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' comments; ints/floats/bools/tuples coerced."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, "
                             f"got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = _coerce(value)
    return out


def format_config_text(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config_file(path) -> dict:
    """Load key=value text or (by .json suffix) a JSON object."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: JSON config must be an object")
        return {k: tuple(v) if isinstance(v, list) else v
                for k, v in data.items()}
    return parse_config_text(text)
