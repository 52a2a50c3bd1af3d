"""Binary checkpoint files for model weights.

Layout, all little-endian:

    bytes 0..7    magic b"GRIDCKPT"
    u32           format version (currently 1)
    u32           tensor count
    repeated, sorted by name:
        u32       name byte length
        bytes     UTF-8 name
        u8        dtype tag (0 = float32, 1 = float64)
        u8        rank
        u64 * r   dimension sizes
        bytes     raw array payload, C order
    u32           CRC-32 (zlib) of everything from the first record to
                  just before this field

Sorting plus fixed field widths make the bytes a pure function of the
weight values, so re-saving an unchanged model reproduces the file
exactly.  Loads verify magic, version, and checksum, and report the
byte offset of any truncation.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"GRIDCKPT"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointFormatError(Exception):
    pass


def save_checkpoint(path, state: dict) -> None:
    """Write a name -> float array mapping."""
    records = bytearray()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        encoded = name.encode("utf-8")
        records += struct.pack("<I", len(encoded))
        records += encoded
        records += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        records += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        records += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    blob = MAGIC + struct.pack("<II", VERSION, len(state)) + records
    blob += struct.pack("<I", zlib.crc32(bytes(records)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> dict:
    """Read back a name -> array mapping, verifying structure and CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointFormatError(
                f"truncated reading {what} at byte {offset}: "
                f"need {n}, have {len(blob) - offset}")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    if take(8, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")

    records_start = offset
    state = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = take(name_len, f"record {i} name").decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, f"record {i} dtype/rank"))
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"record {i} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"record {i} shape"))
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(n_bytes, f"record {i} payload ({name})")
        if name in state:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        state[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    records_end = offset

    (stored_crc,) = struct.unpack("<I", take(4, "checksum"))
    actual_crc = zlib.crc32(blob[records_start:records_end]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointFormatError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")
    if offset != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - offset} trailing bytes after checksum at byte {offset}")
    return state


CONFIG_KEY = "meta.model_config"  # reserved name, never a parameter


def save_model(path, model) -> None:
    """Write the weights plus the architecture vector, so a checkpoint
    can be loaded without knowing the config it was trained with."""
    state = model.state_dict()
    state[CONFIG_KEY] = model.config.to_vector()
    save_checkpoint(path, state)


def load_model(path, model, allow_fresh_adapters: bool = False) -> None:
    """Restore weights in place.  With `allow_fresh_adapters`, low-rank
    factors absent from the file keep their initialization (zero delta),
    which is how a pre-adaptation trunk is loaded for fine-tuning."""
    state = load_checkpoint(path)
    state.pop(CONFIG_KEY, None)
    tags = ("factor_in", "factor_out") if allow_fresh_adapters else ()
    model.load_state_dict(state, allow_missing=tags)
