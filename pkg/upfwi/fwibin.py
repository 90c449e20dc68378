"""FWIBIN container: magic "FWIB", u32 header length, UTF-8 JSON header and a raw little-endian f32 payload.

A file may hold several consecutive containers (checkpoints do), so the readers work on open streams as well.
"""
import io
import json
import struct
import logging
from pathlib import Path

import numpy as np

from .config import Config
from .tools import atomic_path

logger = logging.getLogger("FWIBIN")

_LENGTH = struct.Struct("<I")


def encode(array, name: str = "", meta: dict = None) -> bytes:
    values = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    header = {"dtype": "f32",
              "byte_order": "little",
              "shape": list(values.shape),
              "name": name,
              "schema_version": Config.fwibin_schema_version}
    if meta:
        header["meta"] = meta
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return Config.fwibin_magic + _LENGTH.pack(len(header_bytes)) + header_bytes + values.tobytes(order="C")


def read_block(stream) -> tuple[np.ndarray, dict] | None:
    """Reads one container from the stream, or returns None at a clean end of file."""
    magic = stream.read(4)
    if len(magic) == 0:
        return None
    if magic != Config.fwibin_magic:
        raise ValueError(f"🚨 Not a FWIBIN container (magic {magic!r})")
    raw_length = stream.read(4)
    if len(raw_length) != 4:
        raise ValueError("🚨 Truncated FWIBIN header length")
    (length,) = _LENGTH.unpack(raw_length)
    try:
        header = json.loads(stream.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"🚨 FWIBIN header does not parse as JSON ({e})")
    if header.get("dtype") != "f32" or header.get("byte_order") != "little":
        raise ValueError(f"🚨 Unsupported FWIBIN payload {header.get('dtype')}/{header.get('byte_order')}")
    shape = tuple(int(d) for d in header["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"🚨 FWIBIN payload of '{header.get('name')}' has {len(payload)} bytes, expected {4 * count}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return values, header


def decode(data: bytes) -> tuple[np.ndarray, dict]:
    block = read_block(io.BytesIO(data))
    if block is None:
        raise ValueError("🚨 Empty FWIBIN buffer")
    return block


def save(path, array, name: str = "", meta: dict = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    logger.info(f"Writing '{name}' {np.shape(array)} to '{path}'")
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(encode(array, name, meta))


def load(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"🚨 FWIBIN file '{path.absolute()}' not found")
    logger.info(f"Reading '{path}'")
    with open(path, "rb") as f:
        block = read_block(f)
    if block is None:
        raise ValueError(f"🚨 FWIBIN file '{path.absolute()}' is empty")
    return block


def save_many(path, blocks) -> None:
    """Writes an iterable of (name, array, meta) as consecutive containers in a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            for name, array, meta in blocks:
                f.write(encode(array, name, meta))


def load_many(path) -> list[tuple[np.ndarray, dict]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"🚨 FWIBIN file '{path.absolute()}' not found")
    blocks = []
    with open(path, "rb") as f:
        while (block := read_block(f)) is not None:
            blocks.append(block)
    return blocks
