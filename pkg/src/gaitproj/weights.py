"""Weight fixture files.

Layout (all integers little-endian)::

    bytes 0..7      magic  b"GPWEIGHT"
    bytes 8..11     uint32 header length N
    bytes 12..12+N  UTF-8 JSON header
    bytes 12+N..    data region: float32 little-endian values

The header is ``{"format": "gaitproj-weights", "version": 1,
"config": <NetConfig dict>, "tensors": [{"name", "shape", "offset"}, ...]}``
where ``offset`` is a byte offset into the data region, a multiple of 4.
Tensors are stored row-major, in name order, packed back to back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .net import NetConfig, NetParams, params_from_arrays

MAGIC = b"GPWEIGHT"
PREAMBLE = len(MAGIC) + 4


class WeightFormatError(ValueError):
    pass


def encode(params: NetParams) -> bytes:
    arrays = params.arrays()
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"format": "gaitproj-weights", "version": 1,
              "config": params.config.to_dict(), "tensors": tensors}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes) -> NetParams:
    if len(blob) < PREAMBLE or blob[:len(MAGIC)] != MAGIC:
        raise WeightFormatError("offset 0: missing GPWEIGHT magic")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    data_start = PREAMBLE + hlen
    if data_start > len(blob):
        raise WeightFormatError(f"offset {len(MAGIC)}: header length {hlen} runs past end of file ({len(blob)} bytes)")
    try:
        header = json.loads(blob[PREAMBLE:data_start].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise WeightFormatError(f"offset {PREAMBLE + e.start}: header is not valid UTF-8") from None
    except json.JSONDecodeError as e:
        raise WeightFormatError(f"offset {PREAMBLE + e.pos}: malformed JSON header ({e.msg})") from None
    if not isinstance(header, dict) or header.get("format") != "gaitproj-weights":
        raise WeightFormatError(f"offset {PREAMBLE}: header is not a gaitproj-weights header")
    if header.get("version") != 1:
        raise WeightFormatError(f"offset {PREAMBLE}: unsupported version {header.get('version')!r}")
    try:
        cfg = NetConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise WeightFormatError(f"offset {PREAMBLE}: bad config in header ({e})") from None

    data = memoryview(blob)[data_start:]
    arrays = {}
    for entry in header.get("tensors", []):
        try:
            name, shape, off = entry["name"], tuple(int(s) for s in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise WeightFormatError(f"offset {PREAMBLE}: malformed tensor entry {entry!r}") from None
        count = int(np.prod(shape)) if shape else 1
        if off < 0 or off % 4:
            raise WeightFormatError(f"offset {data_start + off}: tensor {name!r} offset {off} is not 4-byte aligned")
        if off + 4 * count > len(data):
            raise WeightFormatError(
                f"offset {data_start + off}: tensor {name!r} needs {4 * count} bytes at data offset {off}, "
                f"data region holds {len(data)}")
        a = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        if not np.all(np.isfinite(a)):
            raise WeightFormatError(f"offset {data_start + off}: tensor {name!r} holds non-finite values")
        arrays[name] = a.astype(np.float64)
    try:
        return params_from_arrays(cfg, arrays)
    except ValueError as e:
        raise WeightFormatError(f"offset {PREAMBLE}: {e}") from None


def save(params: NetParams, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode(params))
    return path


def load(path: str | Path) -> NetParams:
    return decode(Path(path).read_bytes())
