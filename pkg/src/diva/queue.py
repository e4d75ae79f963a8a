"""Fixed-capacity FIFO of momentum-encoder embeddings (the DaNCE negatives)."""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-4


class MemoryQueue:
    def __init__(self, buffer: np.ndarray, cursor: int = 0, fill: int | None = None):
        buffer = np.array(buffer, dtype=np.float64)
        if buffer.ndim != 2 or buffer.shape[0] < 1:
            raise ValueError("queue buffer must be a non-empty C x D matrix")
        self._buf = buffer
        self.cursor = int(cursor)
        self.fill = buffer.shape[0] if fill is None else int(fill)

    @classmethod
    def init(cls, capacity: int, dim: int, rng: np.random.Generator) -> "MemoryQueue":
        """Queue filled with ``capacity`` random unit vectors."""
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        v = rng.standard_normal((capacity, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v)

    @property
    def capacity(self) -> int:
        return self._buf.shape[0]

    @property
    def dim(self) -> int:
        return self._buf.shape[1]

    def push(self, embeddings: np.ndarray) -> None:
        """Overwrite the oldest entries with ``embeddings`` (rows), FIFO."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if emb.shape[1] != self.dim:
            raise ValueError(f"queue holds {self.dim}-d vectors, got {emb.shape[1]}-d")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("queue entries must have unit norm")
        n, C = emb.shape[0], self.capacity
        if n >= C:
            # only the last C survive; keep ring order consistent with sequential writes
            emb = emb[n - C:]
            start = (self.cursor + n - C) % C
        else:
            start = self.cursor
        pos = (start + np.arange(emb.shape[0])) % C
        self._buf[pos] = emb
        self.cursor = (self.cursor + n) % C
        self.fill = min(C, self.fill + n)

    def snapshot(self) -> np.ndarray:
        """Copy of the currently stored rows (read-only)."""
        out = self._buf[: self.fill].copy()
        out.setflags(write=False)
        return out

    def ordered(self) -> np.ndarray:
        """Stored rows from oldest to newest."""
        if self.fill < self.capacity:
            return self._buf[: self.fill].copy()
        return np.roll(self._buf, -self.cursor, axis=0)

    @property
    def buffer(self) -> np.ndarray:
        return self._buf
