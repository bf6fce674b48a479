"""Physical operator instances with the unfinished/finishing/finished
lifecycle and the end-page relay protocol.

Each operator exposes needs_input / add_input / poll_output /
blocked_reason / state.  Stateless operators pass an end page through
immediately; stateful operators first flush their pending results
(finishing), then forward the end page and become finished.  An operator
instance is driven by one thread at a time.
"""

from __future__ import annotations

import csv
import io
import time
from collections import deque

from ..errors import ExecutionError
from ..pages import DATE, FLOAT64, INT64, Page, STRING, TARGET_PAGE_ROWS
from . import exprs

UNFINISHED = "unfinished"
FINISHING = "finishing"
FINISHED = "finished"

_OUT_CAP = 4  # pages of internal output buffering before needs_input = False


class Operator:
    stateless = True

    def __init__(self, out_schema=()):
        self.state = UNFINISHED
        self.out_schema = tuple(out_schema)
        self._out = deque()

    # -- driver-facing protocol ----------------------------------------

    def needs_input(self):
        return self.state == UNFINISHED and len(self._out) < _OUT_CAP

    def add_input(self, page):
        if self.state == FINISHED:
            raise ExecutionError(f"{type(self).__name__} received input after finish")
        if page.is_end:
            if self.stateless:
                self.state = FINISHED
            else:
                self.state = FINISHING
                self._flush()
                self.state = FINISHED
            self._out.append(Page.end(self.out_schema))
        else:
            self._process(page)

    def poll_output(self):
        return self._out.popleft() if self._out else None

    def has_output(self):
        return bool(self._out)

    def blocked_reason(self):
        return None

    def close(self):
        """Downstream finished without an end page (e.g. LIMIT satisfied)."""
        self.state = FINISHED
        self._out.clear()

    # -- subclass hooks ------------------------------------------------

    def _process(self, page):
        raise NotImplementedError

    def _flush(self):
        pass

    def _emit(self, page):
        if page.row_count or page.is_end:
            self._out.append(page)


def operator_step(op, page=None):
    """Single synchronous step: optional input, then one output poll.

    Returns (output page or None, demand) with demand in
    {"needs-input", "has-output", "blocked", "finished"}.
    """
    if op.state == FINISHED and not op.has_output():
        return None, "finished"
    if page is not None:
        op.add_input(page)
    out = op.poll_output()
    if op.has_output():
        return out, "has-output"
    if op.state == FINISHED:
        return out, "finished"
    if op.blocked_reason():
        return out, "blocked"
    return out, "needs-input"


# -- sources -----------------------------------------------------------------


class SourceOperator(Operator):
    """Head of a pipeline: produces pages instead of consuming them."""

    def __init__(self, out_schema=()):
        super().__init__(out_schema)
        self._finish_early = False

    def needs_input(self):
        return False

    def add_input(self, page):
        raise ExecutionError(f"{type(self).__name__} is a source")

    def signal_end(self):
        """Ask the source to wind down at the next page boundary."""
        self._finish_early = True

    def _end(self):
        self.state = FINISHED
        return Page.end(self.out_schema)


def _parse_cell(text, ctype):
    if text == "":
        return None
    if ctype == INT64:
        return int(text)
    if ctype == FLOAT64:
        return float(text)
    if ctype == DATE:
        y, m, d = text.split("-")
        import datetime

        return (datetime.date(int(y), int(m), int(d)) - datetime.date(1970, 1, 1)).days
    return text


class TableScanOp(SourceOperator):
    """Reads newline-aligned CSV byte-range splits claimed one at a time
    from a shared split queue (claim() -> split | None, plus an
    `exhausted` flag), so tasks of one stage share a global split set."""

    def __init__(self, types, split_queue, rows_per_sec=None):
        super().__init__(types)
        self.types = list(types)
        self.splits = split_queue
        self.rows_per_sec = rows_per_sec
        self._reader = None
        self._emitted_rows = 0
        self._started = None
        self.splits_processed = 0

    def blocked_reason(self):
        if self._reader is None and not self.splits.exhausted() and self.splits.empty():
            return "waiting_for_splits"
        if self._throttled():
            return "throttled"
        return None

    def _throttled(self):
        if self.rows_per_sec is None or self._started is None:
            return False
        allowed = (time.monotonic() - self._started) * self.rows_per_sec
        return self._emitted_rows > allowed

    def _open_next(self):
        split = self.splits.claim()
        if split is None:
            return False
        with open(split.path, "rb") as f:
            f.seek(split.start)
            data = f.read(split.end - split.start)
        self._reader = csv.reader(io.StringIO(data.decode("utf-8")))
        self.splits_processed += 1
        return True

    def poll_output(self):
        if self.state == FINISHED:
            return None
        if self._started is None:
            self._started = time.monotonic()
        if self._throttled():
            return None
        if self._reader is None:
            if self._finish_early or self.splits.exhausted():
                return self._end()
            if not self._open_next():
                return None  # waiting for more splits
        rows = []
        for rec in self._reader:
            rows.append(tuple(_parse_cell(c, t) for c, t in zip(rec, self.types)))
            if len(rows) >= TARGET_PAGE_ROWS:
                break
        else:
            self._reader = None
        if not rows:
            return self.poll_output()
        self._emitted_rows += len(rows)
        return Page.from_rows(self.types, rows)


class ExchangeOp(SourceOperator):
    """Pulls pages from a receive buffer (poll() -> Page | None; the
    buffer yields an end page once all upstream drivers have ended)."""

    def __init__(self, receive_buffer, out_schema=(), rows_per_sec=None):
        super().__init__(out_schema)
        self.buffer = receive_buffer
        self.rows_per_sec = rows_per_sec  # per-driver consumption cap
        self._emitted_rows = 0
        self._started = None

    def blocked_reason(self):
        if self._throttled():
            return "throttled"
        if self.state != FINISHED and not self._finish_early:
            return "exchange_empty"
        return None

    def _throttled(self):
        if self.rows_per_sec is None or self._started is None:
            return False
        allowed = (time.monotonic() - self._started) * self.rows_per_sec
        return self._emitted_rows > allowed

    def poll_output(self):
        if self.state == FINISHED:
            return None
        if self._finish_early:
            return self._end()
        if self._started is None:
            self._started = time.monotonic()
        if self._throttled():
            return None
        page = self.buffer.poll()
        if page is None:
            return None
        if page.is_end:
            return self._end()
        self._emitted_rows += page.row_count
        return page


class LocalExchangeSourceOp(SourceOperator):
    def __init__(self, local_exchange, partition, out_schema=()):
        super().__init__(out_schema)
        self.lex = local_exchange
        self.partition = partition

    def blocked_reason(self):
        return None if self.state == FINISHED else "local_exchange_empty"

    def poll_output(self):
        if self.state == FINISHED:
            return None
        if self._finish_early:
            return self._end()
        item = self.lex.get(self.partition)
        if item is None:
            return None
        if item == "end":
            return self._end()
        return item


# -- stateless transforms ----------------------------------------------------


class FilterOp(Operator):
    def __init__(self, predicate, out_schema=()):
        super().__init__(out_schema)
        self.predicate = predicate

    def _process(self, page):
        import numpy as np

        mask = exprs.predicate_mask(self.predicate, page)
        if mask.all():
            self._emit(page)
        else:
            self._emit(page.take(np.nonzero(mask)[0]))


class ProjectOp(Operator):
    def __init__(self, expressions, types):
        super().__init__(types)
        self.expressions = expressions
        self.types = list(types)

    def _process(self, page):
        columns, valid = [], []
        for e in self.expressions:
            v, m = exprs.evaluate(e, page)
            columns.append(v)
            valid.append(m)
        self._emit(Page(self.types, columns, valid))


# -- aggregation -------------------------------------------------------------


def _agg_state_width(func):
    return 2 if func == "avg" else 1


class PartialAggOp(Operator):
    """Grouped pre-aggregation.  Classified stateless for tuning purposes:
    flushing its hash table at any moment yields correct partial states,
    so the operator may be closed early without losing rows.  The table is
    also flushed when it grows past flush_groups."""

    stateless = False  # end-page handling: flush before forwarding

    def __init__(self, keys, aggs, out_types, flush_groups=1 << 16):
        super().__init__(out_types)
        self.keys = list(keys)
        self.aggs = aggs  # [(func, arg expression)]
        self.out_types = list(out_types)
        self.flush_groups = flush_groups
        self._groups = {}

    def _process(self, page):
        rows = page.to_rows()
        arg_cols = []
        for func, arg in self.aggs:
            v, m = exprs.evaluate(arg, page)
            arg_cols.append([v[i] if m[i] else None for i in range(page.row_count)])
        for r, row in enumerate(rows):
            key = tuple(row[k] for k in self.keys)
            state = self._groups.get(key)
            if state is None:
                state = [None] * len(self.aggs)
                self._groups[key] = state
            for a, (func, _) in enumerate(self.aggs):
                state[a] = _accumulate(func, state[a], arg_cols[a][r])
        if len(self._groups) >= self.flush_groups:
            self._flush()

    def _flush(self):
        if not self._groups:
            return
        out_rows = []
        for key, state in self._groups.items():
            row = list(key)
            for (func, _), acc in zip(self.aggs, state):
                row.extend(_partial_columns(func, acc))
            out_rows.append(tuple(row))
        self._groups = {}
        self._emit(Page.from_rows(self.out_types, out_rows))


class FinalAggOp(Operator):
    """Merges partial states; fixed at parallelism one by the planner."""

    stateless = False

    def __init__(self, key_count, agg_funcs, out_types):
        super().__init__(out_types)
        self.key_count = key_count
        self.agg_funcs = list(agg_funcs)
        self.out_types = list(out_types)
        self._groups = {}

    def _process(self, page):
        for row in page.to_rows():
            key = tuple(row[: self.key_count])
            state = self._groups.get(key)
            if state is None:
                state = [None] * len(self.agg_funcs)
                self._groups[key] = state
            pos = self.key_count
            for a, func in enumerate(self.agg_funcs):
                width = _agg_state_width(func)
                state[a] = _merge(func, state[a], row[pos:pos + width])
                pos += width

    def _flush(self):
        groups = self._groups
        if not groups and self.key_count == 0:
            groups = {(): [None] * len(self.agg_funcs)}
        out_rows = []
        for key, state in groups.items():
            row = list(key)
            for func, acc in zip(self.agg_funcs, state):
                row.append(_finalize(func, acc))
            out_rows.append(tuple(row))
        self._groups = {}
        if out_rows:
            self._emit(Page.from_rows(self.out_types, out_rows))


def _accumulate(func, acc, value):
    if func == "count":
        return (acc or 0) + (1 if value is not None else 0)
    if value is None:
        return acc
    value = value.item() if hasattr(value, "item") else value
    if func == "sum":
        return value if acc is None else acc + value
    if func == "min":
        return value if acc is None else min(acc, value)
    if func == "max":
        return value if acc is None else max(acc, value)
    if func == "avg":
        s, c = acc or (0.0, 0)
        return (s + value, c + 1)
    raise ExecutionError(f"unknown aggregate {func!r}")


def _partial_columns(func, acc):
    """Partial state row fragment for one aggregate (avg = sum, count)."""
    if func == "count":
        return (acc or 0,)
    if func == "avg":
        s, c = acc or (0.0, 0)
        return (s, c)
    return (acc,)  # sum/min/max: None stays NULL


def _merge(func, acc, partial):
    if func == "count":
        return (acc or 0) + (partial[0] or 0)
    if func == "avg":
        s, c = acc or (0.0, 0)
        return (s + (partial[0] or 0.0), c + (partial[1] or 0))
    value = partial[0]
    return _accumulate(func, acc, value)


def _finalize(func, acc):
    if func == "count":
        return acc or 0
    if func == "avg":
        s, c = acc or (0.0, 0)
        return s / c if c else None
    return acc


# -- joins -------------------------------------------------------------------


class HashBuildOp(Operator):
    """Tail of a build pipeline; inserts rows into the shared handle and
    signals builder completion on end page."""

    stateless = False

    def __init__(self, handle, key_indexes):
        super().__init__()
        self.handle = handle
        self.key_indexes = list(key_indexes)
        handle.register_builder()

    def _process(self, page):
        self.handle.insert_page(page, self.key_indexes)

    def add_input(self, page):
        if page.is_end:
            self.handle.builder_done()
            self.state = FINISHED
            return
        self._process(page)

    def close(self):
        if self.state != FINISHED:
            self.handle.builder_done()
        super().close()


class HashProbeOp(Operator):
    """Inner equi-join probe; blocks (yields) until the hash table is
    complete.  handle_ref.handle may be repointed atomically between
    pages during a DOP switch."""

    def __init__(self, handle_ref, probe_keys, probe_types, build_types):
        super().__init__(list(probe_types) + list(build_types))
        self.handle_ref = handle_ref
        self.probe_keys = list(probe_keys)
        self.out_types = list(probe_types) + list(build_types)

    def needs_input(self):
        return self.handle_ref.handle.complete and super().needs_input()

    def blocked_reason(self):
        if not self.handle_ref.handle.complete:
            return "hash_table_building"
        return None

    def _process(self, page):
        handle = self.handle_ref.handle
        if not handle.complete:
            raise ExecutionError("probe ran before hash table completed")
        out_rows = []
        for row in page.to_rows():
            key = tuple(row[i] for i in self.probe_keys)
            if any(k is None for k in key):
                continue
            for build_row in handle.lookup(key):
                out_rows.append(row + build_row)
        if out_rows:
            self._emit(Page.from_rows(self.out_types, out_rows))


class HandleRef:
    """Mutable pointer to the active hash table (atomic repoint target)."""

    def __init__(self, handle):
        self.handle = handle


# -- sort / limit ------------------------------------------------------------


class SortOp(Operator):
    stateless = False

    def __init__(self, keys):
        super().__init__()
        self.keys = list(keys)  # [(index, ascending)]
        self._rows = []
        self._schema = None

    def _process(self, page):
        self._schema = page.schema
        self._rows.extend(page.to_rows())

    def _flush(self):
        if not self._rows:
            return
        rows = self._rows
        # NULLs sort first ascending; stable sort applied minor-key first
        for index, ascending in reversed(self.keys):
            rows.sort(
                key=lambda r: (r[index] is not None,
                               r[index] if r[index] is not None else 0),
                reverse=not ascending,
            )
        self.out_schema = self._schema
        for i in range(0, len(rows), TARGET_PAGE_ROWS):
            self._emit(Page.from_rows(self._schema, rows[i:i + TARGET_PAGE_ROWS]))
        self._rows = []


class LimitOp(Operator):
    stateless = False

    def __init__(self, n):
        super().__init__()
        self.remaining = n

    def needs_input(self):
        return self.remaining > 0 and super().needs_input()

    def _process(self, page):
        if self.remaining <= 0:
            return
        if page.row_count <= self.remaining:
            self.remaining -= page.row_count
            self._emit(page)
        else:
            self._emit(page.take(range(self.remaining)))
            self.remaining = 0
        if self.remaining == 0:
            # satisfied: finish without waiting for upstream end
            self.state = FINISHED
            self._out.append(Page.end(self.out_schema))


# -- sinks -------------------------------------------------------------------


class LocalExchangeSinkOp(Operator):
    def __init__(self, local_exchange):
        super().__init__()
        self.lex = local_exchange
        local_exchange.register_producer()

    def add_input(self, page):
        if page.is_end:
            self.lex.producer_done()
            self.state = FINISHED
            return
        self.lex.put(page)

    def close(self):
        if self.state != FINISHED:
            self.lex.producer_done()
        super().close()


class TaskOutputOp(Operator):
    """Tail of the output pipeline; pushes pages into the task output
    buffer, honoring backpressure by holding at most one page."""

    def __init__(self, buffer):
        super().__init__()
        self.buffer = buffer
        self._held = None
        buffer.register_producer()

    def needs_input(self):
        return self.state == UNFINISHED and self._held is None

    def blocked_reason(self):
        return "output_buffer_full" if self._held is not None else None

    def add_input(self, page):
        if page.is_end:
            assert self._held is None
            self.buffer.producer_done()
            self.state = FINISHED
            return
        if not self.buffer.enqueue(page):
            self._held = page

    def work(self):
        if self._held is not None and self.buffer.enqueue(self._held):
            self._held = None
            return True
        return False

    def close(self):
        if self.state != FINISHED:
            self.buffer.producer_done()
        super().close()
