"""Task egress and ingress buffers with runtime-elastic capacity.

Egress: SharedBuffer (gather / broadcast) and ShuffleBuffer (hash
partitioned through shufflers, one per downstream task group).  Both
deliver pages per buffer id with token-based at-least-once semantics:
re-requesting an old token returns the same batch, and a new token
acknowledges (and frees) everything before it.

Ingress: ExchangeReceiveBuffer accumulates fetched pages and pauses
fetching at capacity; its turn-up counter is the compute-bottleneck
signal used by the tuner.

Capacity starts at one page, doubles whenever the consumer polls an
empty buffer (turn-up), and is re-fitted to the consumption rate every
sample period.
"""

from __future__ import annotations

import threading
import time
from collections import deque

from .errors import (
    CacheDisabled,
    EnqueueAfterEnd,
    UnknownBufferId,
)
from .pages import Page, TARGET_PAGE_BYTES, partition_rows

DEFAULT_MAX_CAPACITY = 64 << 20
DEFAULT_CACHE_CAP = 256 << 20
SAMPLE_PERIOD = 0.5


class ElasticCapacity:
    """Capacity in bytes; grows on empty polls, re-fits to consumption."""

    def __init__(self, initial=TARGET_PAGE_BYTES, max_bytes=DEFAULT_MAX_CAPACITY,
                 period=SAMPLE_PERIOD):
        self.capacity = initial
        self.max_bytes = max_bytes
        self.period = period
        self.turn_up_counter = 0
        self._consumed = 0
        self._period_start = time.monotonic()

    def on_empty_poll(self):
        self.capacity = min(self.capacity * 2, self.max_bytes)
        self.turn_up_counter += 1
        return self.capacity

    def on_consumed(self, nbytes, now=None):
        now = time.monotonic() if now is None else now
        self._consumed += nbytes
        if now - self._period_start >= self.period:
            self.capacity = min(
                max(TARGET_PAGE_BYTES, self._consumed), self.max_bytes
            )
            self._consumed = 0
            self._period_start = now
        return self.capacity


class _Stream:
    """Per-buffer-id delivery state: retained (unacknowledged) pages."""

    __slots__ = ("base", "retained", "end_delivered", "finished")

    def __init__(self):
        self.base = 0
        self.retained = []
        self.end_delivered = False
        self.finished = False  # per-id end: serve retained pages, then end


class _BufferBase:
    def __init__(self, capacity_max=DEFAULT_MAX_CAPACITY, schema=()):
        self._lock = threading.RLock()
        self.capacity = ElasticCapacity(max_bytes=capacity_max)
        self.schema = tuple(schema)
        self.ended = False
        self._producers = 0
        self._producer_ends = 0
        self.rows_enqueued = 0
        self.pages_enqueued = 0

    # -- producer side -------------------------------------------------

    def register_producer(self):
        with self._lock:
            self._producers += 1

    def producer_done(self):
        with self._lock:
            self._producer_ends += 1
            if self._producer_ends >= self._producers:
                self._end_locked()

    def end_signal(self):
        with self._lock:
            self._end_locked()

    def _end_locked(self):
        self.ended = True

    def enqueue(self, page):
        """Returns True if accepted, False when backpressured."""
        if page.is_end:
            raise ValueError("use end_signal / producer_done, not end pages")
        with self._lock:
            if self.ended:
                raise EnqueueAfterEnd("buffer already ended")
            if self.queued_bytes >= self.capacity.capacity:
                return False
            self._accept(page)
            self.rows_enqueued += page.row_count
            self.pages_enqueued += 1
            return True

    @property
    def queued_bytes(self):
        """Bytes waiting for the slowest consumer (backpressure gauge)."""
        return self._gauge()

    def _accept(self, page):
        raise NotImplementedError

    # -- consumer side -------------------------------------------------

    def get(self, buffer_id, token, max_pages=16):
        """(pages, next_token, complete). Token n acknowledges pages < n."""
        with self._lock:
            st = self._stream(buffer_id)
            if token > st.base:
                drop = token - st.base
                st.retained = st.retained[drop:]
                st.base = token
            while not st.finished and len(st.retained) < max_pages:
                page = self._pull(buffer_id)
                if page is None:
                    break
                st.retained.append(page)
                self.capacity.on_consumed(page.byte_size())
            if not st.end_delivered and (
                st.finished
                or (self.ended and not self._has_pending(buffer_id))
            ):
                st.retained.append(Page.end(self.schema))
                st.end_delivered = True
            if not st.retained and not self.ended:
                self.capacity.on_empty_poll()
            pages = list(st.retained)
            return pages, st.base + len(pages), st.end_delivered

    def is_complete(self):
        with self._lock:
            return self.ended and all(
                s.end_delivered and len(s.retained) == 0
                for s in self._streams().values()
            )

    def finish_buffer_id(self, buffer_id):
        """Per-id end signal: the id stops receiving new pages; its reader
        sees retained pages followed by an end page."""
        with self._lock:
            self._stream(buffer_id).finished = True

    def buffer_ids(self):
        with self._lock:
            return sorted(self._streams())

    def _stream(self, buffer_id):
        try:
            return self._streams()[buffer_id]
        except KeyError:
            raise UnknownBufferId(f"buffer id {buffer_id}") from None


class SharedBuffer(_BufferBase):
    """Gather: one shared queue consumed work-stealing style by all
    buffer ids.  Broadcast: every page goes to every buffer id; with the
    page cache enabled, ids added later can replay from the start."""

    def __init__(self, mode="gather", buffer_ids=(0,), cache=False,
                 capacity_max=DEFAULT_MAX_CAPACITY, schema=()):
        assert mode in ("gather", "broadcast")
        super().__init__(capacity_max, schema)
        self.mode = mode
        self.cache_enabled = cache
        self._cache = []
        self._shared = deque()  # gather mode
        self._per_id = {}  # broadcast mode: id -> deque
        self._ids = {}
        for bid in buffer_ids:
            self.add_buffer_id(bid)

    def _streams(self):
        return self._ids

    def _gauge(self):
        if self.mode == "gather":
            return sum(p.byte_size() for p in self._shared)
        if not self._per_id:
            return 0
        return max(
            sum(p.byte_size() for p in q) for q in self._per_id.values()
        )

    def _accept(self, page):
        if self.cache_enabled:
            self._cache.append(page)
        if self.mode == "gather":
            self._shared.append(page)
        else:
            for q in self._per_id.values():
                q.append(page)

    def _pull(self, buffer_id):
        q = self._shared if self.mode == "gather" else self._per_id[buffer_id]
        return q.popleft() if q else None

    def _has_pending(self, buffer_id):
        q = self._shared if self.mode == "gather" else self._per_id[buffer_id]
        return bool(q)

    def add_buffer_id(self, buffer_id, replay=False):
        with self._lock:
            assert buffer_id not in self._ids
            self._ids[buffer_id] = _Stream()
            if self.mode == "broadcast":
                q = deque()
                if replay:
                    if not self.cache_enabled:
                        raise CacheDisabled("replay requires the page cache")
                    q.extend(self._cache)
                self._per_id[buffer_id] = q

    def remove_buffer_id(self, buffer_id):
        with self._lock:
            st = self._ids.pop(buffer_id, None)
            if st is None:
                raise UnknownBufferId(f"buffer id {buffer_id}")
            if self.mode == "gather":
                # redistribute unacknowledged pages to the surviving ids
                # (a finished stream's reader consumed them before ending)
                if not st.finished:
                    for page in reversed(st.retained):
                        if not page.is_end:
                            self._shared.appendleft(page)
            else:
                self._per_id.pop(buffer_id, None)


class _Shuffler:
    """Partitions enqueued pages across one task group's buffer ids."""

    def __init__(self, buffer_ids, keys):
        self.ids = list(buffer_ids)
        self.keys = list(keys)
        self.pending = {bid: deque() for bid in self.ids}
        self.retired = False

    @property
    def executor_count(self):
        return len(self.ids)

    def route(self, page):
        parts = partition_rows(page, self.keys, len(self.ids))
        for bid, part in zip(self.ids, parts):
            if part.row_count:
                self.pending[bid].append(part)


class ShuffleBuffer(_BufferBase):
    """Hash-partitioned task output.  Each shuffler serves one downstream
    task group; a page enqueued while k shufflers are active reaches all
    k groups.  The optional page cache retains every enqueued page so a
    new group can be backfilled via reshuffle()."""

    def __init__(self, keys, buffer_ids=(0,), cache=False,
                 capacity_max=DEFAULT_MAX_CAPACITY,
                 cache_cap=DEFAULT_CACHE_CAP, schema=()):
        super().__init__(capacity_max, schema)
        self.keys = list(keys)
        self.cache_enabled = cache
        self.cache_cap = cache_cap
        self._cache = []
        self._cache_bytes = 0
        self._shufflers = [_Shuffler(buffer_ids, self.keys)]
        self._ids = {bid: _Stream() for bid in buffer_ids}

    def _streams(self):
        return self._ids

    def _gauge(self):
        active = [sh for sh in self._shufflers if not sh.retired]
        if not active:
            return 0
        return max(
            sum(p.byte_size() for q in sh.pending.values() for p in q)
            for sh in active
        )

    def _accept(self, page):
        if self.cache_enabled:
            self._cache.append(page)
            self._cache_bytes += page.byte_size()
            if self._cache_bytes > self.cache_cap:
                raise MemoryError("shuffle page cache exceeded its cap")
        for sh in self._shufflers:
            if not sh.retired:
                sh.route(page)

    def _shuffler_of(self, buffer_id):
        for sh in self._shufflers:
            if buffer_id in sh.pending:
                return sh
        raise UnknownBufferId(f"buffer id {buffer_id}")

    def _pull(self, buffer_id):
        q = self._shuffler_of(buffer_id).pending[buffer_id]
        return q.popleft() if q else None

    def _has_pending(self, buffer_id):
        return bool(self._shuffler_of(buffer_id).pending[buffer_id])

    def buffer_id_groups(self):
        with self._lock:
            return [list(sh.ids) for sh in self._shufflers if not sh.retired]

    def remove_buffer_id(self, buffer_id):
        """Drop one consumer id.  Only valid once no further rows can
        hash to its partition (its reader finished after every stage
        input ended), so nothing needs redistributing."""
        with self._lock:
            st = self._ids.pop(buffer_id, None)
            if st is None:
                raise UnknownBufferId(f"buffer id {buffer_id}")
            for sh in self._shufflers:
                if buffer_id in sh.pending:
                    sh.pending.pop(buffer_id)
                    sh.ids = [b for b in sh.ids if b != buffer_id]
                    break

    def reshuffle(self, new_group):
        """New shuffler for a new task group, backfilled from the cache."""
        with self._lock:
            if not self.cache_enabled:
                raise CacheDisabled("reshuffle requires the page cache")
            sh = _Shuffler(new_group, self.keys)
            for page in self._cache:
                sh.route(page)
            self._shufflers.append(sh)
            for bid in new_group:
                assert bid not in self._ids
                self._ids[bid] = _Stream()
                if self.ended:
                    pass  # end page is appended lazily by get()
            return sh

    def switch_group(self, new_group):
        """Atomic consumer-group switch for the probe side of a DOP switch:
        pages not yet delivered to the old group are re-partitioned into
        the new group, old ids conclude with end pages after their already
        delivered pages, and subsequent enqueues reach only the new group.
        Atomicity is per page: a page is processed by exactly one group."""
        with self._lock:
            sh_new = _Shuffler(new_group, self.keys)
            for sh in self._shufflers:
                if sh.retired:
                    continue
                for bid, q in sh.pending.items():
                    while q:
                        sh_new.route(q.popleft())
                    if bid in self._ids:
                        self._ids[bid].finished = True
                sh.retired = True
            self._shufflers.append(sh_new)
            for bid in new_group:
                assert bid not in self._ids
                self._ids[bid] = _Stream()
            return sh_new

    def retire_group(self, group):
        """Drop a task group's shuffler once its tasks are destroyed.
        Matches by id subset (single ids may have been removed earlier
        when their readers finished) and is idempotent."""
        with self._lock:
            target = set(group)
            for sh in self._shufflers:
                if sh.ids and set(sh.ids) <= target:
                    sh.retired = True
                    for bid in sh.ids:
                        self._ids.pop(bid, None)
                    sh.ids = []
                    sh.pending = {}


class ExchangeReceiveBuffer:
    """Ingress side of an exchange: fetched pages queue here until the
    exchange operators consume them.  Fetching pauses at capacity.  The
    local end page appears once every expected upstream has completed."""

    def __init__(self, capacity_max=DEFAULT_MAX_CAPACITY, schema=()):
        self._lock = threading.Lock()
        self.capacity = ElasticCapacity(max_bytes=capacity_max)
        self.schema = tuple(schema)
        self._queue = deque()
        self.queued_bytes = 0
        self._expected = set()
        self._completed = set()
        self._no_more_upstreams = False
        self.pages_received = 0
        self.rows_received = 0

    # -- fetcher side --------------------------------------------------

    def add_upstream(self, uid):
        with self._lock:
            self._expected.add(uid)

    def remove_upstream(self, uid):
        with self._lock:
            self._expected.discard(uid)
            self._completed.discard(uid)

    def no_more_upstreams(self):
        with self._lock:
            self._no_more_upstreams = True

    def upstream_complete(self, uid):
        with self._lock:
            self._completed.add(uid)

    def upstreams(self):
        with self._lock:
            return sorted(self._expected)

    def fetch_paused(self):
        with self._lock:
            return self.queued_bytes >= self.capacity.capacity

    def push(self, pages):
        with self._lock:
            for p in pages:
                if p.is_end:
                    continue
                self._queue.append(p)
                self.queued_bytes += p.byte_size()
                self.pages_received += 1
                self.rows_received += p.row_count

    # -- consumer side -------------------------------------------------

    def _complete_locked(self):
        return (
            self._no_more_upstreams
            and self._expected <= self._completed
        )

    def poll(self):
        with self._lock:
            if self._queue:
                page = self._queue.popleft()
                self.queued_bytes -= page.byte_size()
                self.capacity.on_consumed(page.byte_size())
                return page
            if self._complete_locked():
                return Page.end(self.schema)
            self.capacity.on_empty_poll()
            return None

    @property
    def turn_up_counter(self):
        return self.capacity.turn_up_counter

    def is_complete(self):
        with self._lock:
            return self._complete_locked() and not self._queue
