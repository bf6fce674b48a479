"""Drivers: the smallest unit of scheduling and execution.

A driver owns an ordered operator chain (head source-like, tail
sink-like) and moves pages between adjacent operators inside a time
slice.  It is destroyed only when every operator has reached the
finished state; the end-page relay guarantees that happens once the head
emits its end page.
"""

from __future__ import annotations

import itertools
import time

from .operators import FINISHED, SourceOperator

_ids = itertools.count()


class Driver:
    def __init__(self, ops, driver_id=None, pipeline_id=None):
        assert len(ops) >= 2
        self.ops = list(ops)
        self.id = next(_ids) if driver_id is None else driver_id
        self.pipeline_id = pipeline_id
        self.created_at = time.monotonic()
        self.rows_out = 0

    @property
    def finished(self):
        return all(op.state == FINISHED for op in self.ops)

    def signal_end(self):
        head = self.ops[0]
        if isinstance(head, SourceOperator):
            head.signal_end()

    def blocked_reason(self):
        for op in self.ops:
            r = op.blocked_reason()
            if r:
                return r
        return None

    def _step(self):
        moved = False
        ops = self.ops
        tail = ops[-1]
        if hasattr(tail, "work") and tail.work():
            moved = True
        for i in range(len(ops) - 1, 0, -1):
            up, down = ops[i - 1], ops[i]
            if down.state == FINISHED and not down.has_output():
                if up.state != FINISHED:
                    up.close()  # e.g. LIMIT satisfied: unwind upstream
                    moved = True
                continue
            if down.needs_input():
                page = up.poll_output()
                if page is not None:
                    down.add_input(page)
                    self.rows_out += page.row_count if down is tail else 0
                    moved = True
        return moved

    def run(self, time_slice=0.05):
        """Run until finished, blocked, or the slice expires.

        Returns "finished" | "blocked" | "yielded".
        """
        deadline = time.monotonic() + time_slice
        while True:
            moved = self._step()
            if self.finished:
                return "finished"
            if not moved:
                return "blocked"
            if time.monotonic() >= deadline:
                return "yielded"
