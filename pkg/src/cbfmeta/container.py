"""Deterministic binary container: magic, JSON header, little-endian float64 arrays.

Used for network checkpoints so that save/load round-trips are bit-exact
across platforms.
"""

import json

import numpy as np

from .errors import FormatMismatch

_HEADER_LEN_BYTES = 8


def pack(magic: bytes, meta: dict, arrays: list[np.ndarray]) -> bytes:
    header = dict(meta)
    header["shapes"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [magic, len(blob).to_bytes(_HEADER_LEN_BYTES, "little"), blob]
    for a in arrays:
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def unpack(data: bytes, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    if not data.startswith(magic):
        raise FormatMismatch("bad magic")
    pos = len(magic)
    if len(data) < pos + _HEADER_LEN_BYTES:
        raise FormatMismatch("truncated header length")
    n = int.from_bytes(data[pos : pos + _HEADER_LEN_BYTES], "little")
    pos += _HEADER_LEN_BYTES
    if len(data) < pos + n:
        raise FormatMismatch("truncated header")
    try:
        meta = json.loads(data[pos : pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatMismatch("unreadable header") from exc
    pos += n
    shapes = meta.get("shapes")
    if shapes is None:
        raise FormatMismatch("header missing shapes")
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < pos + nbytes:
            raise FormatMismatch("truncated array payload")
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(shape)
        arrays.append(arr.astype(np.float64))
        pos += nbytes
    if pos != len(data):
        raise FormatMismatch("trailing bytes after payload")
    return meta, arrays


def write_file(path, magic: bytes, meta: dict, arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(magic, meta, arrays))


def read_file(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        return unpack(fh.read(), magic)
