"""Bounded per-node sample stores for streaming training.

Sliding Window keeps the last D samples. Interesting Data keeps a sample only
when its gradient norm beats the running mean of every norm seen so far.
"""
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

import numpy as np

from ssta.errors import ConfigError, ReplayError

EVICTION_POLICIES = ("smallest", "fifo")


@dataclass
class BufferEntry:
    sample_id: int
    sample: Any
    grad_norm: Optional[float] = None


class ReplayBuffer:
    """Capacity-D store of samples in arrival order, plus running norm statistics."""

    def __init__(self, capacity: int, eviction: str = "smallest"):
        if capacity < 0:
            raise ConfigError(f"buffer: capacity must be >= 0, got {capacity}")
        if eviction not in EVICTION_POLICIES:
            raise ConfigError(f"id_eviction: expected one of {EVICTION_POLICIES}, got {eviction!r}")
        self.capacity = capacity
        self.eviction = eviction
        self.entries: List[BufferEntry] = []
        self.seen = 0
        self.norm_total = 0.0
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def mean_norm(self) -> float:
        """Mean of every norm ever offered; 0 before the first."""
        return self.norm_total / self.seen if self.seen else 0.0

    def samples(self) -> List[Any]:
        return [e.sample for e in self.entries]

    def snapshot(self) -> Tuple:
        return list(self.entries), self.seen, self.norm_total, self._next_id

    def restore(self, state: Tuple) -> None:
        entries, self.seen, self.norm_total, self._next_id = state
        self.entries = list(entries)

    def _append(self, sample: Any, grad_norm: Optional[float]) -> BufferEntry:
        entry = BufferEntry(self._next_id, sample, grad_norm)
        self._next_id += 1
        self.entries.append(entry)
        return entry


def sw_offer(buffer: ReplayBuffer, sample: Any) -> ReplayBuffer:
    """Append, then drop the oldest entries beyond capacity."""
    if buffer.capacity == 0:
        return buffer
    buffer._append(sample, None)
    while len(buffer.entries) > buffer.capacity:
        buffer.entries.pop(0)
    return buffer


def id_offer(buffer: ReplayBuffer, sample: Any, grad_norm: float) -> Tuple[ReplayBuffer, bool]:
    """Store `sample` iff `grad_norm` exceeds the mean of all earlier norms."""
    if not math.isfinite(grad_norm) or grad_norm < 0:
        raise ReplayError(f"gradient norm must be finite and >= 0, got {grad_norm}")
    previous_mean = buffer.mean_norm
    buffer.seen += 1
    buffer.norm_total += grad_norm
    if grad_norm <= previous_mean or buffer.capacity == 0:
        return buffer, False
    entry = buffer._append(sample, grad_norm)
    if len(buffer.entries) > buffer.capacity:
        if buffer.eviction == "fifo":
            buffer.entries.pop(0)
        else:
            # min() picks the first (oldest) of equal norms
            victim = min(range(len(buffer.entries)), key=lambda i: buffer.entries[i].grad_norm)
            buffer.entries.pop(victim)
    return buffer, any(e is entry for e in buffer.entries)


def draw_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> List[Any]:
    """Shuffled mini-batch that always contains the newest entry.

    The rest is drawn uniformly without replacement, or with replacement when
    the batch is larger than the buffer.
    """
    if not buffer.entries:
        raise ReplayError("cannot draw a batch from an empty buffer")
    if batch_size < 1:
        raise ReplayError(f"batch size must be >= 1, got {batch_size}")
    n = len(buffer.entries)
    picks = [n - 1]
    if batch_size > n:
        picks += [int(i) for i in rng.integers(0, n, size=batch_size - 1)]
    elif batch_size > 1:
        picks += [int(i) for i in rng.choice(n - 1, size=batch_size - 1, replace=False)]
    order = rng.permutation(len(picks))
    return [buffer.entries[picks[j]].sample for j in order]
