"""Binary checkpoint container.

Layout (little-endian)::

    b"LLCK" | u32 version | u8 kind | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
    per tensor: u16 name_len | name | u8 rank | rank x u64 dims | float32 data

The metadata carries a SHA-256 of the tensor payload so flipped bytes are
caught as well as truncation.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LLCK"
VERSION = 1
KINDS = {"backbone": 0, "adaptor": 1}
KIND_NAMES = {v: k for k, v in KINDS.items()}


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    """Not a checkpoint file (bad magic or unknown kind)."""


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """Truncated, padded or corrupted payload, or a digest mismatch."""


@dataclass
class Checkpoint:
    kind: str
    metadata: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_module(cls, kind: str, module: torch.nn.Module, metadata: dict, extra=None) -> "Checkpoint":
        tensors = OrderedDict(
            (name, t.detach().cpu().to(torch.float32).numpy().copy()) for name, t in module.state_dict().items()
        )
        for name, t in (extra or {}).items():
            tensors[name] = t.detach().cpu().to(torch.float32).numpy().copy()
        return cls(kind, dict(metadata), tensors)

    def state_dict(self, prefix_filter: str | None = None, dtype=torch.float32) -> dict:
        return OrderedDict(
            (k, torch.from_numpy(v.copy()).to(dtype))
            for k, v in self.tensors.items()
            if prefix_filter is None or not k.startswith(prefix_filter)
        )


def _payload(tensors) -> bytes:
    parts = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())
    return b"".join(parts)


def dumps(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise FormatError(f"unknown checkpoint kind {ckpt.kind!r}")
    payload = _payload(ckpt.tensors)
    meta = dict(ckpt.metadata)
    meta["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<IBI", VERSION, KINDS[ckpt.kind], len(meta_raw)) + meta_raw
    return head + struct.pack("<I", len(ckpt.tensors)) + payload


def save(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = dumps(ckpt)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"file truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes, expected_digest: str | None = None) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic; not an LLCK checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this reader supports {VERSION}")
    (kind_code,) = r.unpack("<B")
    if kind_code not in KIND_NAMES:
        raise FormatError(f"unknown checkpoint kind code {kind_code}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable metadata: {exc}") from None
    (count,) = r.unpack("<I")
    start = r.pos
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    if r.pos != len(data):
        raise IntegrityError(f"{len(data) - r.pos} trailing bytes after {count} declared tensors")
    digest = meta.pop("payload_sha256", None)
    if digest is not None and hashlib.sha256(data[start:]).hexdigest() != digest:
        raise IntegrityError("payload digest mismatch")
    if expected_digest is not None and meta.get("config_digest") != expected_digest:
        raise IntegrityError(
            f"config digest {meta.get('config_digest')} does not match expected {expected_digest}"
        )
    return Checkpoint(KIND_NAMES[kind_code], meta, tensors)


def load(path, expected_digest: str | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_digest)
