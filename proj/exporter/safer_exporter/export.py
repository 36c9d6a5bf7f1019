"""Export jobs: run a model over text, capture one layer's hidden states and
write them as activation shards."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Protocol, Sequence

import numpy as np

from .shard import Manifest, Record, ShardWriter

log = logging.getLogger("safer_exporter")


class ExportError(RuntimeError):
    pass


class HiddenStateModel(Protocol):
    """What an exporter needs from a model."""

    depth: int  # number of transformer blocks
    hidden_size: int
    max_length: int  # context window in tokens
    template: str  # "chat" or "raw": how prompt and response are joined

    def tokenize(self, text: str) -> List[int]: ...

    def join(self, prompt: str, response: str) -> str: ...

    def hidden_states(self, batch: Sequence[Sequence[int]], layer: int) -> List[np.ndarray]:
        """Post-block hidden states of block `layer` (1-based), one
        (tokens, hidden_size) array per sequence."""
        ...


@dataclass
class ExportJob:
    model: str
    out: str
    layer_fraction: Optional[float] = 0.75
    layer: Optional[int] = None
    dataset: str = ""
    batch: int = 8
    device: Optional[str] = None
    all_tokens: bool = False

    def resolve_layer(self, depth: int) -> int:
        if depth < 1:
            raise ExportError("model depth must be positive")
        if self.layer is not None:
            index = self.layer
        else:
            f = self.layer_fraction
            if f is None or not (0.0 < f <= 1.0):
                raise ExportError(f"layer_fraction must be in (0, 1], got {f}")
            index = math.floor(f * depth)
        if not (1 <= index <= depth):
            raise ExportError(f"layer index {index} outside model depth {depth}")
        return index

    def source_label(self, model: HiddenStateModel, layer: int) -> str:
        return f"model:{self.model};layer:{layer};site:post_block;template:{model.template}"


@dataclass
class PreferenceTriplet:
    id: int
    prompt: str
    chosen: str
    rejected: str
    flipped: bool = False
    tokens_chosen: int = 1
    tokens_rejected: int = 1
    response_tokens_chosen: int = 1
    response_tokens_rejected: int = 1
    extra: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        keys = ("id", "prompt", "chosen", "rejected", "flipped", "tokens_chosen", "tokens_rejected",
                "response_tokens_chosen", "response_tokens_rejected")
        return json.dumps({k: getattr(self, k) for k in keys}, ensure_ascii=False, separators=(",", ":"))


def read_triplets(path: str) -> List[PreferenceTriplet]:
    rows, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                j = json.loads(line)
                t = PreferenceTriplet(int(j["id"]), j["prompt"], j["chosen"], j["rejected"],
                                      bool(j.get("flipped", False)))
            except (ValueError, KeyError, TypeError) as e:
                raise ExportError(f"{path}:{lineno}: malformed preference record: {e}") from e
            if t.id in seen:
                raise ExportError(f"{path}:{lineno}: duplicate id {t.id}")
            seen.add(t.id)
            rows.append(t)
    return rows


def write_triplets(path: str, rows: Iterable[PreferenceTriplet]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in rows:
            f.write(t.to_json() + "\n")


def _is_oom(e: BaseException) -> bool:
    return isinstance(e, MemoryError) or "out of memory" in str(e).lower()


class _Runner:
    """Batched inference with a single out-of-memory retry at half batch."""

    def __init__(self, model: HiddenStateModel, layer: int, batch: int):
        if batch < 1:
            raise ExportError("batch must be positive")
        self.model, self.layer, self.batch = model, layer, batch
        self.retried = False

    def run(self, seqs: List[List[int]]) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        i = 0
        while i < len(seqs):
            chunk = seqs[i:i + self.batch]
            try:
                states = self.model.hidden_states(chunk, self.layer)
            except Exception as e:
                if not _is_oom(e) or self.retried or self.batch == 1:
                    raise
                self.retried = True
                self.batch = max(1, self.batch // 2)
                log.warning("out of memory at batch %d; retrying with batch %d", len(chunk), self.batch)
                continue
            for s, ids in zip(states, chunk):
                s = np.asarray(s, dtype=np.float32)
                if s.shape != (len(ids), self.model.hidden_size):
                    raise ExportError(f"model returned shape {s.shape} for {len(ids)} tokens")
                out.append(s)
            i += len(chunk)
        return out


def export_pretrain(job: ExportJob, model: HiddenStateModel, corpus: Iterable[str]) -> int:
    """One generic record per token, token_count=1. Documents longer than the
    context are split into context-sized windows. Returns the record count."""
    layer = job.resolve_layer(model.depth)
    seqs: List[List[int]] = []
    for doc in corpus:
        ids = model.tokenize(doc)
        seqs.extend(ids[k:k + model.max_length] for k in range(0, len(ids), model.max_length))
    runner = _Runner(model, layer, job.batch)
    manifest = Manifest(d=model.hidden_size, stage="pretrain", layer_index=layer,
                        source_label=job.source_label(model, layer))
    with ShardWriter(job.out, manifest) as w:
        token = 0
        for start in range(0, len(seqs), job.batch):
            for states in runner.run(seqs[start:start + job.batch]):
                for row in states:
                    w.append(Record(token, "generic", 1, row[None, :]))
                    token += 1
    log.info("pretrain export: %d token records from layer %d", token, layer)
    return token


def export_preference(job: ExportJob, model: HiddenStateModel, triplets: Sequence[PreferenceTriplet],
                      dataset_out: Optional[str] = None) -> List[PreferenceTriplet]:
    """Two records per triplet over prompt+response. Triplets whose either
    side exceeds the context are skipped and logged by id. Returns the
    exported triplets with token counts filled in, also written to
    `dataset_out` when given."""
    layer = job.resolve_layer(model.depth)
    kept: List[PreferenceTriplet] = []
    seqs: List[List[int]] = []
    for t in triplets:
        chosen = model.tokenize(model.join(t.prompt, t.chosen))
        rejected = model.tokenize(model.join(t.prompt, t.rejected))
        if max(len(chosen), len(rejected)) > model.max_length or not chosen or not rejected:
            log.warning("skipping triplet %d: sequence of %d tokens exceeds context %d", t.id,
                        max(len(chosen), len(rejected)), model.max_length)
            continue
        t.tokens_chosen, t.tokens_rejected = len(chosen), len(rejected)
        t.response_tokens_chosen = max(1, len(model.tokenize(t.chosen)))
        t.response_tokens_rejected = max(1, len(model.tokenize(t.rejected)))
        kept.append(t)
        seqs.extend([chosen, rejected])

    runner = _Runner(model, layer, job.batch)
    manifest = Manifest(d=model.hidden_size, stage="preference", layer_index=layer,
                        source_label=job.source_label(model, layer))
    with ShardWriter(job.out, manifest) as w:
        step = max(2, job.batch - job.batch % 2)
        for start in range(0, len(seqs), step):
            states = runner.run(seqs[start:start + step])
            for k, s in enumerate(states):
                t = kept[(start + k) // 2]
                role = "chosen" if (start + k) % 2 == 0 else "rejected"
                payload = s if job.all_tokens else s[-1:]
                w.append(Record(t.id, role, s.shape[0], payload))
    if dataset_out:
        write_triplets(dataset_out, kept)
    log.info("preference export: %d triplets, %d skipped, layer %d", len(kept), len(triplets) - len(kept), layer)
    return kept
