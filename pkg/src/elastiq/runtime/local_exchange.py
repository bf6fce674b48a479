"""Intra-task shared structures: local exchange and hash-table handle.

Both are shared across the drivers of one task and are safe for
concurrent producers and consumers.  The local exchange hash-partitions
pages across its consumer partitions; when every registered producer has
delivered its end page, an end marker is broadcast to every partition.
"""

from __future__ import annotations

import threading
import time
from collections import deque

from ..pages import Page, partition_rows

_END = object()


class LocalExchange:
    def __init__(self, keys, partition_count=1):
        self.keys = list(keys)
        self._lock = threading.Lock()
        self._queues = [deque() for _ in range(partition_count)]
        self._closed = set()
        self._producers = 0
        self._ends = 0
        self.ended = False

    @property
    def partition_count(self):
        return len(self._queues)

    def register_producer(self):
        with self._lock:
            assert not self.ended
            self._producers += 1

    def add_partition(self):
        """New consumer partition; returns its index. Only affects routing
        of pages enqueued afterwards."""
        with self._lock:
            self._queues.append(deque())
            if self.ended:
                self._queues[-1].append(_END)
            return len(self._queues) - 1

    def put(self, page):
        with self._lock:
            assert not self.ended
            active = [i for i in range(len(self._queues)) if i not in self._closed]
            parts = partition_rows(page, self.keys, len(active))
            for i, part in zip(active, parts):
                if part.row_count:
                    self._queues[i].append(part)

    def close_partition(self, partition):
        """Retire a consumer partition; its pending pages move to the
        surviving partitions so no rows are lost."""
        with self._lock:
            self._closed.add(partition)
            survivors = [i for i in range(len(self._queues))
                         if i not in self._closed]
            pending = list(self._queues[partition])
            self._queues[partition].clear()
            for k, page in enumerate(pending):
                if survivors:
                    self._queues[survivors[k % len(survivors)]].append(page)
            self._queues[partition].append(_END)

    def producer_done(self):
        with self._lock:
            self._ends += 1
            if self._ends >= self._producers and not self.ended:
                self.ended = True
                for q in self._queues:
                    q.append(_END)

    def get(self, partition):
        """Next page for the partition, the end marker, or None if empty."""
        with self._lock:
            q = self._queues[partition]
            if not q:
                return None
            item = q.popleft()
        return "end" if item is _END else item


class HashTableHandle:
    """Shared equi-join hash table: build-state building -> complete.

    Rows are inserted by build drivers as materialized tuples keyed by
    their join-key tuple; rows with any NULL key never match and are
    dropped at insert.  Immutable once complete.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._map = {}
        self._builders = 0
        self._done = 0
        self._complete = threading.Event()
        self.started_at = None
        self.completed_at = None

    @property
    def build_state(self):
        return "complete" if self._complete.is_set() else "building"

    @property
    def complete(self):
        return self._complete.is_set()

    def wait_complete(self, timeout=None):
        return self._complete.wait(timeout)

    def register_builder(self):
        with self._lock:
            assert not self.complete
            if self.started_at is None:
                self.started_at = time.monotonic()
            self._builders += 1

    def insert_page(self, page, key_indexes):
        rows = page.to_rows()
        with self._lock:
            assert not self.complete
            for row in rows:
                key = tuple(row[i] for i in key_indexes)
                if any(k is None for k in key):
                    continue
                self._map.setdefault(key, []).append(row)

    def builder_done(self):
        with self._lock:
            self._done += 1
            if self._done >= self._builders:
                self.completed_at = time.monotonic()
                self._complete.set()

    def build_seconds(self):
        if self.started_at is None:
            return 0.0
        end = self.completed_at if self.completed_at is not None else time.monotonic()
        return end - self.started_at

    def lookup(self, key):
        return self._map.get(key, ())

    def row_count(self):
        return sum(len(v) for v in self._map.values())
