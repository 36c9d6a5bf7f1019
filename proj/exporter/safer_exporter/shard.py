"""Activation shard binary format.

Header: magic "SAEA", version u32, d u32, record_count u64, stage u8.
Record: pair_id u64, role u8, token_count u32, has_all_tokens u8, then
(token_count if has_all_tokens else 1) x d float32. All little-endian.
A key=value manifest sidecar sits next to the shard at <path>.manifest.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, List, Tuple

import numpy as np

MAGIC = b"SAEA"
VERSION = 1
STAGES = {"pretrain": 0, "preference": 1}
ROLES = {"generic": 0, "chosen": 1, "rejected": 2}

_HEADER = struct.Struct("<4sIIQB")
_RECORD = struct.Struct("<QBIB")
_COUNT_OFFSET = 12


class ShardFormatError(ValueError):
    pass


@dataclass
class Manifest:
    d: int
    stage: str
    layer_index: int = 0
    record_count: int = 0
    source_label: str = ""


@dataclass
class Record:
    pair_id: int
    role: str
    token_count: int
    values: np.ndarray  # (rows, d) float32; rows is token_count or 1

    @property
    def has_all_tokens(self) -> bool:
        return self.values.shape[0] == self.token_count and self.token_count > 1

    @property
    def last_token(self) -> np.ndarray:
        return self.values[-1]


def manifest_path(path: str) -> str:
    return path + ".manifest"


def _validate(rec: Record, m: Manifest) -> np.ndarray:
    values = np.ascontiguousarray(rec.values, dtype="<f4")
    if values.ndim != 2 or values.shape[1] != m.d:
        raise ShardFormatError(f"record {rec.pair_id}: vector length does not match manifest d={m.d}")
    if rec.token_count < 1:
        raise ShardFormatError(f"record {rec.pair_id}: token_count must be >= 1")
    if values.shape[0] not in (1, rec.token_count):
        raise ShardFormatError(f"record {rec.pair_id}: payload rows must be 1 or token_count")
    if not np.all(np.isfinite(values)):
        raise ShardFormatError(f"record {rec.pair_id}: non-finite activation")
    if (rec.role == "generic") != (m.stage == "pretrain"):
        raise ShardFormatError(f"record {rec.pair_id}: role {rec.role} not valid in a {m.stage} shard")
    return values


class ShardWriter:
    """Single-writer streaming output. The record count is patched into the
    header on close, so callers may skip records while writing."""

    def __init__(self, path: str, manifest: Manifest):
        if manifest.d < 1:
            raise ShardFormatError("manifest d must be positive")
        if manifest.stage not in STAGES:
            raise ShardFormatError(f"unknown stage {manifest.stage!r}")
        self.path = path
        self.manifest = manifest
        self.count = 0
        self._tmp = path + ".tmp"
        self._out: BinaryIO = open(self._tmp, "wb")
        self._out.write(_HEADER.pack(MAGIC, VERSION, manifest.d, 0, STAGES[manifest.stage]))

    def append(self, rec: Record) -> None:
        values = _validate(rec, self.manifest)
        all_tokens = values.shape[0] == rec.token_count and rec.token_count > 1
        self._out.write(_RECORD.pack(rec.pair_id, ROLES[rec.role], rec.token_count, int(all_tokens)))
        self._out.write(values.tobytes())
        self.count += 1

    def close(self) -> int:
        self._out.seek(_COUNT_OFFSET)
        self._out.write(struct.pack("<Q", self.count))
        self._out.close()
        os.replace(self._tmp, self.path)
        self.manifest.record_count = self.count
        with open(manifest_path(self.path), "w", encoding="utf-8") as f:
            f.write(f"d={self.manifest.d}\n")
            f.write(f"layer_index={self.manifest.layer_index}\n")
            f.write(f"record_count={self.count}\n")
            f.write(f"stage={self.manifest.stage}\n")
            f.write(f"source_label={self.manifest.source_label}\n")
        return os.path.getsize(self.path)

    def abort(self) -> None:
        self._out.close()
        if os.path.exists(self._tmp):
            os.remove(self._tmp)

    def __enter__(self) -> "ShardWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_shard(records: List[Record], manifest: Manifest, path: str) -> int:
    with ShardWriter(path, manifest) as w:
        for r in records:
            w.append(r)
    return os.path.getsize(path)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ShardFormatError(f"truncated {what}")
    return b


def iter_shard(path: str) -> Tuple[Manifest, Iterator[Record]]:
    f = open(path, "rb")
    magic, version, d, count, stage = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
    if magic != MAGIC:
        raise ShardFormatError("bad magic")
    if version != VERSION:
        raise ShardFormatError(f"unsupported version {version}")
    stages = {v: k for k, v in STAGES.items()}
    roles = {v: k for k, v in ROLES.items()}
    manifest = Manifest(d=d, stage=stages[stage], record_count=count)
    sidecar = manifest_path(path)
    if os.path.exists(sidecar):
        with open(sidecar, encoding="utf-8") as s:
            kv = dict(line.rstrip("\n").split("=", 1) for line in s if "=" in line)
        manifest.layer_index = int(kv.get("layer_index", 0))
        manifest.source_label = kv.get("source_label", "")

    def records() -> Iterator[Record]:
        with f:
            for i in range(count):
                pair_id, role, tokens, all_tokens = _RECORD.unpack(_read_exact(f, _RECORD.size, f"record {i}"))
                rows = tokens if all_tokens else 1
                payload = _read_exact(f, rows * d * 4, f"record {i} payload")
                values = np.frombuffer(payload, dtype="<f4").reshape(rows, d)
                yield Record(pair_id, roles[role], tokens, values)
            if f.read(1):
                raise ShardFormatError("trailing bytes after last record")

    return manifest, records()


def read_shard(path: str) -> Tuple[Manifest, List[Record]]:
    manifest, it = iter_shard(path)
    return manifest, list(it)
