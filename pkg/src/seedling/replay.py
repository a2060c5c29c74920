"""Learner-side storage: a bounded FIFO for unrolls and a prioritized
sequence buffer sampled through a sum tree."""

from __future__ import annotations

import collections
import threading
from typing import Any, Optional

import numpy as np


class NotReady(RuntimeError):
    """The buffer holds fewer items than its minimum sampling size."""


class QueueClosed(RuntimeError):
    pass


class TrajectoryQueue:
    """Bounded FIFO.  When full, ``push`` blocks (default) or drops the oldest item."""

    def __init__(self, capacity: int, drop_oldest: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.drop_oldest = drop_oldest
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0
        self.pushed = 0

    def __len__(self):
        return len(self._items)

    def push(self, item, timeout: Optional[float] = None) -> bool:
        with self._cond:
            if self.drop_oldest:
                if len(self._items) >= self.capacity:
                    self._items.popleft()
                    self.dropped += 1
            else:
                ok = self._cond.wait_for(
                    lambda: self._closed or len(self._items) < self.capacity, timeout)
                if self._closed:
                    raise QueueClosed()
                if not ok:
                    return False
            self._items.append(item)
            self.pushed += 1
            self._cond.notify_all()
            return True

    def pop(self, timeout: Optional[float] = None):
        items = self.pop_batch(1, timeout)
        return None if items is None else items[0]

    def pop_batch(self, n: int, timeout: Optional[float] = None) -> Optional[list]:
        """Take ``n`` items at once, in FIFO order, or None on timeout/close."""
        if n > self.capacity:
            raise ValueError("batch larger than queue capacity")
        with self._cond:
            ok = self._cond.wait_for(lambda: self._closed or len(self._items) >= n, timeout)
            if not ok or len(self._items) < n:
                return None
            out = [self._items.popleft() for _ in range(n)]
            self._cond.notify_all()
            return out

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class SumTree:
    """Flat-array binary tree of partial sums; leaves padded to a power of two."""

    def __init__(self, capacity: int):
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.capacity = capacity
        self.nodes = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, index):
        return self.nodes[np.asarray(index) + self.size]

    def set(self, index: int, value: float):
        i = index + self.size
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def rebuild(self):
        for i in range(self.size - 1, 0, -1):
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]

    def find(self, values) -> np.ndarray:
        """Leaf indices whose prefix-sum interval contains each value."""
        values = np.asarray(values, np.float64)
        idx = np.ones(values.shape, np.int64)
        while self.size > 1 and idx.size and idx.flat[0] < self.size:
            left = 2 * idx
            lv = self.nodes[left]
            # never descend into an empty right subtree (guards float round-off)
            go_right = (values >= lv) & (self.nodes[left + 1] > 0)
            values = np.where(go_right, values - lv, values)
            idx = np.where(go_right, left + 1, left)
        return idx - self.size


class PrioritizedBuffer:
    """Ring of sequences with proportional prioritized sampling.

    Items are addressed by generation-tagged ids, so ids of evicted items
    are recognised as stale and ignored by :meth:`update_priorities`.
    """

    REBUILD_EVERY = 1_000_000

    def __init__(self, capacity: int, min_size: int = 1, priority_exponent: float = 0.9,
                 importance_exponent: float = 0.6, sequence_length: Optional[int] = None,
                 seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.min_size = max(1, min_size)
        self.alpha = priority_exponent
        self.beta = importance_exponent
        self.sequence_length = sequence_length
        self.tree = SumTree(capacity)
        self._items: list[Any] = [None] * capacity
        self._used = np.zeros(capacity, bool)
        self._gen = np.zeros(capacity, np.int64)
        self._priority = np.zeros(capacity)
        self._next = 0
        self._size = 0
        self._max_priority = 1.0
        self._updates = 0
        self._lock = threading.Lock()
        self._rng = np.random.default_rng(seed)
        self.inserted = 0

    def __len__(self):
        return self._size

    def _id(self, slot: int) -> int:
        return int(self._gen[slot]) * self.capacity + slot

    def _bump(self):
        self._updates += 1
        if self._updates % self.REBUILD_EVERY == 0:
            self.tree.rebuild()

    def insert(self, seq, priority: Optional[float] = None) -> int:
        """Store ``seq``; ``priority=None`` uses the max priority seen so far."""
        if self.sequence_length is not None:
            n = len(seq)
            if n != self.sequence_length:
                raise ValueError(f"sequence length {n} != {self.sequence_length}")
        with self._lock:
            p = self._max_priority if priority is None else float(priority)
            if p < 0 or not np.isfinite(p):
                raise ValueError("priority must be finite and >= 0")
            self._max_priority = max(self._max_priority, p)
            slot = self._next
            self._next = (slot + 1) % self.capacity
            if self._used[slot]:
                self._gen[slot] += 1
            self._used[slot] = True
            self._items[slot] = seq
            self._priority[slot] = p
            self.tree.set(slot, p ** self.alpha)
            self._size = min(self._size + 1, self.capacity)
            self.inserted += 1
            self._bump()
            return self._id(slot)

    def probabilities(self) -> np.ndarray:
        with self._lock:
            leaves = self.tree.get(np.arange(self.capacity))
            return leaves / leaves.sum()

    def sample(self, batch_size: int, rng: Optional[np.random.Generator] = None):
        """Draw ``batch_size`` items i.i.d. with P(i) proportional to p_i^alpha.

        Returns (items, ids, importance_weights); weights are
        (N P(i))^-beta divided by their batch maximum.
        """
        rng = rng or self._rng
        with self._lock:
            if self._size < self.min_size:
                raise NotReady(f"{self._size} < min_size {self.min_size}")
            total = self.tree.total
            if total <= 0:
                slots = rng.integers(0, self._size, batch_size)
                probs = np.full(batch_size, 1.0 / self._size)
            else:
                u = rng.random(batch_size) * total
                slots = self.tree.find(u)
                slots = np.minimum(slots, self.capacity - 1)
                probs = self.tree.get(slots) / total
            items = [self._items[s] for s in slots]
            ids = [self._id(int(s)) for s in slots]
            n = self._size
        with np.errstate(divide="ignore"):
            w = (n * probs) ** (-self.beta)
        w = np.where(np.isfinite(w), w, 0.0)
        w = w / w.max() if w.max() > 0 else np.ones_like(w)
        return items, ids, w

    def update_priorities(self, ids, priorities):
        priorities = np.asarray(priorities, np.float64)
        if np.any(priorities < 0) or not np.isfinite(priorities).all():
            raise ValueError("priorities must be finite and >= 0")
        with self._lock:
            for i, p in zip(ids, priorities):
                slot = int(i) % self.capacity
                gen = int(i) // self.capacity
                if gen != self._gen[slot] or not self._used[slot]:
                    continue
                self._priority[slot] = p
                self._max_priority = max(self._max_priority, float(p))
                self.tree.set(slot, float(p) ** self.alpha)
                self._bump()

    def is_live(self, item_id: int) -> bool:
        slot = int(item_id) % self.capacity
        return bool(self._used[slot]) and int(item_id) // self.capacity == self._gen[slot]

    def exact_total(self) -> float:
        with self._lock:
            return float(np.sum(self._priority[self._used] ** self.alpha))

