"""Binary checkpoints: parameters plus optimizer state, bit-exact.

Layout: magic ``NFPC\\x01``, uint32 little-endian header length, a UTF-8
JSON header, then the raw little-endian float64 arrays in header order.
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"NFPC\x01"


@dataclass
class Checkpoint:
    digest: str
    iteration: int
    epoch: int
    params: np.ndarray
    arrays: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    names = ["params"] + sorted(ck.arrays)
    blobs = [np.asarray(ck.params)] + [np.asarray(ck.arrays[n]) for n in names[1:]]
    header = {
        "digest": ck.digest,
        "iteration": int(ck.iteration),
        "epoch": int(ck.epoch),
        "scalars": ck.scalars,
        "extra": ck.extra,
        "arrays": [[n, list(b.shape)] for n, b in zip(names, blobs)],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blobs)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def from_bytes(data: bytes, expect_digest=None) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic or version)")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        header = json.loads(data[pos + 4:pos + 4 + n].decode())
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    pos += 4 + n
    if expect_digest is not None and header["digest"] != expect_digest:
        raise FormatError("checkpoint was written for a different network")
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise FormatError("truncated checkpoint")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint arrays")
    params = arrays.pop("params")
    return Checkpoint(header["digest"], header["iteration"], header["epoch"], params, arrays,
                      header["scalars"], header.get("extra", {}))


def save(path, ck: Checkpoint):
    """Atomic write: a crash mid-save leaves the previous file intact."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ck))
    os.replace(tmp, path)


def load(path, expect_digest=None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data, expect_digest)
