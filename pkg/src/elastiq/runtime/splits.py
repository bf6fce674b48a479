"""Shared pending-split queue for the table scans of one task.

Scan drivers of a task claim splits one at a time, so drivers can be
added or removed mid-query without re-planning split assignment.  The
coordinator feeds splits in batches and eventually marks the set done.
"""

from __future__ import annotations

import threading
from collections import deque


class SplitQueue:
    def __init__(self, splits=(), done=False):
        self._lock = threading.Lock()
        self._queue = deque(splits)
        self._done = done
        self.total_added = len(self._queue)
        self.total_bytes = sum(s.end - s.start for s in self._queue)
        self.claimed_bytes = 0

    def add(self, splits, done=False):
        with self._lock:
            splits = list(splits)
            self._queue.extend(splits)
            self.total_added += len(splits)
            self.total_bytes += sum(s.end - s.start for s in splits)
            if done:
                self._done = True

    def close(self):
        with self._lock:
            self._done = True

    def claim(self):
        with self._lock:
            if not self._queue:
                return None
            split = self._queue.popleft()
            self.claimed_bytes += split.end - split.start
            return split

    def unclaim(self, split):
        with self._lock:
            self._queue.appendleft(split)
            self.claimed_bytes -= split.end - split.start

    def pending_bytes(self):
        with self._lock:
            return sum(s.end - s.start for s in self._queue)

    def empty(self):
        with self._lock:
            return not self._queue

    def exhausted(self):
        with self._lock:
            return self._done and not self._queue

    def pending(self):
        with self._lock:
            return len(self._queue)
