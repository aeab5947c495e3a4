"""Binary checkpoint format for model parameters.

Layout, all little-endian:

    8 bytes   magic "RDIFF\\x00\\x01\\x00" (name + format version 1.0)
    u32       length of the JSON header in bytes
    bytes     UTF-8 JSON header: {"kind", "meta", "arrays": [{name, shape}]}
    bytes     payload: the arrays as raw float64, concatenated in header order
    u32       CRC-32 of the payload

Arrays are written in sorted-name order so files are byte-identical across
runs for identical parameters.  Loads validate the magic and the checksum
and fail loudly on any mismatch or truncation.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RDIFF\x00\x01\x00"


class ModelFormatError(ValueError):
    pass


def save_arrays(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays plus a JSON-serializable meta dict."""
    names = sorted(arrays)
    header = {
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_arrays(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (kind, meta, arrays)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise ModelFormatError(f"{path}: file too short")
    if blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic")
    off = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if off + header_len + 4 > len(blob):
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}") from exc
    off += header_len
    payload = blob[off:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != crc_stored:
        raise ModelFormatError(f"{path}: checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    pos = 0
    for spec in header["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = payload[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise ModelFormatError(f"{path}: truncated payload for array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise ModelFormatError(f"{path}: trailing bytes in payload")
    return header["kind"], header["meta"], arrays
