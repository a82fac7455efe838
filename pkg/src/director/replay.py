"""Sequence replay buffer with one FIFO ring per environment stream.

A chunk is sampled uniformly over all start offsets whose ``length`` steps
are stored contiguously (in write order) in a single stream. Chunks may run
across an episode boundary; the ``is_first`` flag marks where the world
model must reset.
"""

from __future__ import annotations

import numpy as np

from .worldmodel import ReplaySequence


class NotReady(RuntimeError):
    """Raised when the buffer cannot yet provide a full chunk."""


class ReplayBuffer:
    def __init__(self, capacity: int, image_shape: tuple[int, ...], action_dim: int,
                 streams: int = 1, seed: int = 0):
        per = capacity // streams
        if per < 1:
            raise ValueError("capacity must be at least one step per stream")
        self.capacity = per * streams
        self.per_stream = per
        self.streams = streams
        self.image = np.zeros((streams, per, *image_shape), np.uint8)
        self.action = np.zeros((streams, per, action_dim), np.float32)
        self.reward = np.zeros((streams, per), np.float32)
        self.is_first = np.zeros((streams, per), bool)
        self.written = np.zeros(streams, np.int64)
        self.rng = np.random.default_rng([seed, 7])

    def __len__(self) -> int:
        return int(np.minimum(self.written, self.per_stream).sum())

    def add(self, stream: int, image: np.ndarray, action: np.ndarray, reward: float,
            is_first: bool) -> None:
        """Append the transition (x_t, a_t, r_t) with the ``is_first`` flag of x_t."""
        i = self.written[stream] % self.per_stream
        if image.dtype != np.uint8:
            image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
        self.image[stream, i] = image
        self.action[stream, i] = action
        self.reward[stream, i] = reward
        self.is_first[stream, i] = is_first
        self.written[stream] += 1

    def _starts(self, length: int) -> np.ndarray:
        stored = np.minimum(self.written, self.per_stream)
        return np.maximum(stored - length + 1, 0)

    def ready(self, length: int) -> bool:
        return bool(self._starts(length).sum() > 0)

    def sample(self, batch: int, length: int) -> ReplaySequence:
        counts = self._starts(length)
        total = int(counts.sum())
        if total == 0:
            raise NotReady(f"no stream holds {length} contiguous steps yet")
        flat = self.rng.integers(total, size=batch)
        bounds = np.cumsum(counts)
        stream = np.searchsorted(bounds, flat, side="right")
        offset = flat - np.concatenate([[0], bounds[:-1]])[stream]
        oldest = self.written[stream] - np.minimum(self.written[stream], self.per_stream)
        idx = (oldest[:, None] + offset[:, None] + np.arange(length)) % self.per_stream
        s = stream[:, None]
        return ReplaySequence(
            image=self.image[s, idx],
            action=self.action[s, idx],
            reward=self.reward[s, idx],
            is_first=self.is_first[s, idx],
        )

    def cursor(self) -> dict:
        return {"written": [int(w) for w in self.written], "per_stream": self.per_stream}
