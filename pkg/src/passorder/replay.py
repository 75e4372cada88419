from __future__ import annotations

import threading

import numpy as np

from .exceptions import NotReady


class ReplayMemory:
    """Bounded FIFO of experiences with uniform batch sampling.

    Insert and sample hold the same lock, so a concurrent writer and reader
    see each other's operations in a single total order.
    """

    def __init__(self, capacity=1_000_000, min_fill=320):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.min_fill = min_fill
        self._items = []
        self._head = 0  # next slot to overwrite once full
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return len(self._items)

    def _put(self, experience):
        if len(self._items) < self.capacity:
            self._items.append(experience)
        else:
            self._items[self._head] = experience
            self._head = (self._head + 1) % self.capacity

    def insert(self, experience) -> None:
        with self._lock:
            self._put(experience)

    def extend(self, experiences) -> None:
        with self._lock:
            for e in experiences:
                self._put(e)

    def ready(self, batch_size=1) -> bool:
        n = len(self)
        return n >= self.min_fill and n >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        with self._lock:
            n = len(self._items)
            if n < self.min_fill or n < batch_size:
                raise NotReady(f"{n} experiences stored, need {max(self.min_fill, batch_size)}")
            idx = rng.choice(n, size=batch_size, replace=False)
            return [self._items[i] for i in idx]

    def snapshot(self) -> list:
        with self._lock:
            return self._items[self._head:] + self._items[:self._head]
