"""Bounded blocking FIFO between feature producers and a trainer-side consumer."""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Iterator, Optional


class QueueClosed(Exception):
    """Raised by ``put`` once the queue is closed, and by ``get`` once closed and drained."""


class FeatureQueue:
    """Thread-safe bounded queue with close semantics and occupancy accounting.

    ``put`` blocks while ``capacity`` items are buffered. ``close()`` lets the
    consumer drain what is already buffered; ``close(discard=True)`` drops it
    and reports the count through ``dropped``.
    """

    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        self._closed = False
        self.max_occupancy = 0
        self.put_count = 0
        self.get_count = 0
        self.dropped = 0
        self.blocked_s = 0.0  # total producer time spent waiting for space

    def __len__(self):
        with self._lock:
            return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, item, timeout: Optional[float] = None) -> float:
        """Enqueue ``item``; returns the seconds spent blocked on a full queue."""
        with self._not_full:
            if self._closed:
                raise QueueClosed("queue is closed")
            waited = 0.0
            if len(self._items) >= self.capacity:
                start = time.perf_counter()
                deadline = None if timeout is None else start + timeout
                while len(self._items) >= self.capacity and not self._closed:
                    remaining = None if deadline is None else deadline - time.perf_counter()
                    if remaining is not None and remaining <= 0:
                        raise TimeoutError("queue full")
                    self._not_full.wait(remaining)
                waited = time.perf_counter() - start
                self.blocked_s += waited
                if self._closed:
                    raise QueueClosed("queue closed while waiting")
            self._items.append(item)
            self.put_count += 1
            self.max_occupancy = max(self.max_occupancy, len(self._items))
            self._not_empty.notify()
            return waited

    def get(self, timeout: Optional[float] = None):
        with self._not_empty:
            deadline = None if timeout is None else time.perf_counter() + timeout
            while not self._items:
                if self._closed:
                    raise QueueClosed("queue closed and drained")
                remaining = None if deadline is None else deadline - time.perf_counter()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError("queue empty")
                self._not_empty.wait(remaining)
            item = self._items.popleft()
            self.get_count += 1
            self._not_full.notify()
            return item

    def close(self, discard: bool = False) -> int:
        """Stop accepting items. With ``discard``, drop buffered items and return how many."""
        with self._lock:
            self._closed = True
            n = 0
            if discard:
                n = len(self._items)
                self._items.clear()
                self.dropped += n
            self._not_empty.notify_all()
            self._not_full.notify_all()
            return n

    def __iter__(self) -> Iterator:
        while True:
            try:
                yield self.get()
            except QueueClosed:
                return

    def iter_batches(self, batch_size: int = 8) -> Iterator[list]:
        batch = []
        for item in self:
            batch.append(item)
            if len(batch) == batch_size:
                yield batch
                batch = []
        if batch:
            yield batch
