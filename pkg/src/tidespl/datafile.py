"""Binary spike data file ("NSPK").

Layout, all little-endian::

    magic      4 bytes  b"NSPK"
    version    u32
    flags      u32      bit 0 labels, bit 1 conditions, bit 2 ground-truth
                        latents, bit 3 inferred latents
    n_trials   u32
    n_neurons  u32
    truth_dim  u32      0 unless bit 2
    infer_dim  u32      0 unless bit 3
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (manifest and other metadata)
    lengths    u32[n_trials]
    counts     u32[sum(lengths) * n_neurons], row-major (trial, time, neuron)
    labels     i64[n_trials]                          if bit 0
    conditions i64[n_trials]                          if bit 1
    truth      f64[sum(lengths) * truth_dim]          if bit 2
    inferred   f64[sum(lengths) * infer_dim]          if bit 3
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synthdata import Partition

MAGIC = b"NSPK"
VERSION = 1
F_LABELS, F_CONDITIONS, F_TRUTH, F_INFERRED = 1, 2, 4, 8
_HEADER = struct.Struct("<4sIIIIIII")


class DataFormatError(ValueError):
    """Malformed data file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")


@dataclass
class SpikeFile:
    partition: Partition
    meta: dict
    inferred: list[np.ndarray] | None = None


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode(part: Partition, meta: dict | None = None, inferred: list[np.ndarray] | None = None) -> bytes:
    n = len(part)
    N = part.n_neurons
    lengths = part.lengths
    for i, c in enumerate(part.counts):
        if c.ndim != 2 or c.shape[1] != N:
            raise ValueError(f"trial {i}: counts must be (T, {N})")
        if np.any(c < 0) or np.any(c != np.round(c)) or np.any(c > np.iinfo(np.uint32).max):
            raise ValueError(f"trial {i}: counts must be non-negative integers below 2**32")
    flags = 0
    truth_dim = infer_dim = 0
    if part.labels is not None:
        flags |= F_LABELS
    if part.conditions is not None:
        flags |= F_CONDITIONS
    if part.latents is not None:
        flags |= F_TRUTH
        truth_dim = part.latents[0].shape[1] if n else 0
    if inferred is not None:
        if len(inferred) != n:
            raise ValueError("inferred latents need one array per trial")
        flags |= F_INFERRED
        infer_dim = inferred[0].shape[1] if n else 0
    meta_b = _canon_json(meta or {})
    chunks = [
        _HEADER.pack(MAGIC, VERSION, flags, n, N, truth_dim, infer_dim, len(meta_b)),
        meta_b,
        lengths.astype("<u4").tobytes(),
    ]
    if n:
        chunks.append(np.concatenate(part.counts, axis=0).astype("<u4").tobytes())
    if flags & F_LABELS:
        chunks.append(part.labels.astype("<i8").tobytes())
    if flags & F_CONDITIONS:
        chunks.append(part.conditions.astype("<i8").tobytes())
    for arrs, dim in ((part.latents, truth_dim), (inferred, infer_dim)):
        if arrs is None:
            continue
        for i, (a, T) in enumerate(zip(arrs, lengths)):
            if a.shape != (T, dim):
                raise ValueError(f"trial {i}: latents must be ({T}, {dim}), got {a.shape}")
        if n:
            chunks.append(np.concatenate(arrs, axis=0).astype("<f8").tobytes())
    return b"".join(chunks)


def decode(data: bytes) -> SpikeFile:
    if len(data) < _HEADER.size:
        raise DataFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, flags, n, N, truth_dim, infer_dim, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", 4)
    if flags & ~0xF:
        raise DataFormatError(f"unknown flag bits {flags:#x}", 8)
    off = _HEADER.size

    def take(nbytes, what):
        nonlocal off
        if off + nbytes > len(data):
            raise DataFormatError(f"truncated {what}: need {nbytes} bytes, {len(data) - off} left", off)
        chunk = data[off:off + nbytes]
        off += nbytes
        return chunk

    try:
        meta = json.loads(take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"metadata is not valid JSON: {e}", _HEADER.size) from None
    lengths = np.frombuffer(take(4 * n, "trial lengths"), dtype="<u4").astype(np.int64)
    total = int(lengths.sum())
    counts = np.frombuffer(take(4 * total * N, "counts"), dtype="<u4").astype(np.int64).reshape(total, N)
    labels = conditions = truth = inferred = None
    if flags & F_LABELS:
        labels = np.frombuffer(take(8 * n, "labels"), dtype="<i8").astype(np.int64)
    if flags & F_CONDITIONS:
        conditions = np.frombuffer(take(8 * n, "conditions"), dtype="<i8").astype(np.int64)
    if flags & F_TRUTH:
        truth = np.frombuffer(take(8 * total * truth_dim, "ground-truth latents"), dtype="<f8").reshape(total, truth_dim)
    if flags & F_INFERRED:
        inferred = np.frombuffer(take(8 * total * infer_dim, "inferred latents"), dtype="<f8").reshape(total, infer_dim)
    if off != len(data):
        raise DataFormatError(f"{len(data) - off} trailing bytes", off)

    bounds = np.concatenate([[0], np.cumsum(lengths)])

    def split(a):
        return None if a is None else [a[bounds[i]:bounds[i + 1]].copy() for i in range(n)]

    part = Partition(split(counts), split(truth), labels, conditions)
    return SpikeFile(part, meta, split(inferred))


def write(path, part: Partition, meta: dict | None = None, inferred=None, overwrite: bool = False) -> bytes:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite to replace it")
    data = encode(part, meta, inferred)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return data


def read(path) -> SpikeFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    try:
        return decode(data)
    except DataFormatError as e:
        raise DataFormatError(f"{path}: {e}") from None
