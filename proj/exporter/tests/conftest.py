import zlib
from typing import List, Sequence

import numpy as np
import pytest


class FakeModel:
    """Deterministic causal stand-in: word-hash embeddings plus a running
    mean of the prefix, scaled by layer depth."""

    template = "raw"

    def __init__(self, depth=16, hidden_size=12, max_length=64):
        self.depth, self.hidden_size, self.max_length = depth, hidden_size, max_length
        self.calls: List[int] = []
        self.fail_batches_over = None

    def tokenize(self, text: str) -> List[int]:
        return [zlib.crc32(w.encode()) for w in text.split()]

    def join(self, prompt: str, response: str) -> str:
        return prompt + "\n" + response

    def _embed(self, tok: int) -> np.ndarray:
        return np.random.default_rng(tok).standard_normal(self.hidden_size)

    def hidden_states(self, batch: Sequence[Sequence[int]], layer: int):
        self.calls.append(len(batch))
        if self.fail_batches_over is not None and len(batch) > self.fail_batches_over:
            raise RuntimeError("CUDA out of memory")
        out = []
        for ids in batch:
            e = np.stack([self._embed(t) for t in ids])
            prefix = np.cumsum(e, axis=0) / np.arange(1, len(ids) + 1)[:, None]
            out.append((e + prefix * layer / self.depth).astype(np.float32))
        return out


@pytest.fixture
def model():
    return FakeModel()
