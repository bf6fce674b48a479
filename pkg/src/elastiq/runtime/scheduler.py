"""Multi-level feedback scheduler for drivers.

Three priority levels with growing time slices (10/50/200 ms): new
drivers start hot, long runners sink to the batch level, and entries
stuck longer than a second are promoted again so nothing starves.
Blocked drivers are parked and re-polled on a 100 ms fallback timer (or
immediately via wake())."""

from __future__ import annotations

import threading
import time
from collections import deque

TIME_SLICES = (0.010, 0.050, 0.200)
AGING = 1.0
PARK_POLL = 0.100


class DriverScheduler:
    def __init__(self, threads=4):
        self._cv = threading.Condition()
        self._queues = [deque() for _ in TIME_SLICES]
        self._parked = {}  # driver id -> (driver, level, callback, parked_at)
        self._cancelled = set()
        self._stop = False
        self._threads = [
            threading.Thread(target=self._worker, name=f"driver-{i}", daemon=True)
            for i in range(threads)
        ]
        for t in self._threads:
            t.start()

    def submit(self, driver, on_finish=None):
        with self._cv:
            self._queues[0].append((driver, 0, on_finish, time.monotonic()))
            self._cv.notify()

    def wake(self, driver):
        with self._cv:
            entry = self._parked.pop(driver.id, None)
            if entry:
                drv, level, cb, _ = entry
                self._queues[level].append((drv, level, cb, time.monotonic()))
                self._cv.notify()

    def wake_all(self):
        with self._cv:
            for drv, level, cb, _ in self._parked.values():
                self._queues[level].append((drv, level, cb, time.monotonic()))
            self._parked.clear()
            self._cv.notify_all()

    def cancel(self, driver):
        with self._cv:
            self._cancelled.add(driver.id)
            self._parked.pop(driver.id, None)

    def _unpark_stale(self, now):
        stale = [d for d, e in self._parked.items() if now - e[3] >= PARK_POLL]
        for did in stale:
            drv, level, cb, _ = self._parked.pop(did)
            self._queues[level].append((drv, level, cb, now))

    def _promote_aged(self, now):
        for level in range(1, len(self._queues)):
            q = self._queues[level]
            while q and now - q[0][3] >= AGING:
                drv, _, cb, ts = q.popleft()
                self._queues[level - 1].append((drv, level - 1, cb, ts))

    def _pick(self):
        with self._cv:
            while not self._stop:
                now = time.monotonic()
                self._unpark_stale(now)
                self._promote_aged(now)
                for q in self._queues:
                    if q:
                        return q.popleft()
                self._cv.wait(timeout=0.02)
            return None

    def _worker(self):
        while True:
            entry = self._pick()
            if entry is None:
                return
            driver, level, cb, _ = entry
            if driver.id in self._cancelled:
                with self._cv:
                    self._cancelled.discard(driver.id)
                continue
            outcome = driver.run(TIME_SLICES[level])
            now = time.monotonic()
            if outcome == "finished":
                if cb:
                    cb(driver)
            elif outcome == "blocked":
                with self._cv:
                    self._parked[driver.id] = (driver, level, cb, now)
            else:  # yielded: demote
                with self._cv:
                    nxt = min(level + 1, len(self._queues) - 1)
                    self._queues[nxt].append((driver, nxt, cb, now))
                    self._cv.notify()

    def queued_count(self):
        with self._cv:
            return sum(len(q) for q in self._queues) + len(self._parked)

    def shutdown(self):
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=2)
