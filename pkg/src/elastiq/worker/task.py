"""Task assembly and lifecycle on a worker.

A task instantiates its fragment's pipelines as drivers, wires the
shared intra-task structures (split queue, receive buffers, local
exchanges, hash tables, output buffer), and supports intra-task DOP
changes while running: extra drivers claim work from the shared
structures, removed drivers wind down through the end-page relay.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

from ..buffers import ExchangeReceiveBuffer, SharedBuffer, ShuffleBuffer
from ..catalog import SystemSplit
from ..errors import InvalidSpec, PipelineFixed, TaskFinished
from ..plan.pipelines import PipelineSpec
from ..runtime import operators as ops
from ..runtime.driver import Driver
from ..runtime.local_exchange import HashTableHandle, LocalExchange
from ..runtime.splits import SplitQueue
from ..sql.serde import expr_from_json


@dataclass(frozen=True)
class TaskId:
    query_id: str
    stage: int
    seq: int

    def __str__(self):
        return f"{self.query_id}.{self.stage}_{self.seq}"

    @staticmethod
    def parse(text):
        query_id, rest = text.rsplit(".", 1)
        stage, seq = rest.split("_")
        return TaskId(query_id, int(stage), int(seq))

    @staticmethod
    def from_json(d):
        return TaskId(d["query"], int(d["stage"]), int(d["seq"]))

    def to_json(self):
        return {"query": self.query_id, "stage": self.stage, "seq": self.seq}


@dataclass(frozen=True)
class RemoteSplit:
    """Address of an upstream task's output: worker URL + task id."""

    worker_url: str
    task: str  # str(TaskId) of the upstream task

    @property
    def key(self):
        return (self.worker_url, self.task)

    def to_json(self):
        return {"url": self.worker_url, "task": self.task}

    @staticmethod
    def from_json(d):
        return RemoteSplit(d["url"], d["task"])


class _Fetcher(threading.Thread):
    """Pulls pages for one upstream task into a receive buffer."""

    def __init__(self, transport, remote, buffer_id, rbuf):
        super().__init__(daemon=True, name=f"fetch-{remote.task}")
        self.transport = transport
        self.remote = remote
        self.buffer_id = buffer_id
        self.rbuf = rbuf
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def run(self):
        token = 0
        while not self._stop.is_set():
            if self.rbuf.fetch_paused():
                time.sleep(0.005)
                continue
            try:
                pages, token, complete = self.transport.get_results(
                    self.remote.worker_url, self.remote.task,
                    self.buffer_id, token,
                )
            except Exception:
                time.sleep(0.05)  # retry with the same token (idempotent)
                continue
            if pages:
                self.rbuf.push(pages)
            if complete:
                self.rbuf.upstream_complete(self.remote.key)
                try:  # final ack so the upstream frees its retained pages
                    self.transport.get_results(
                        self.remote.worker_url, self.remote.task,
                        self.buffer_id, token,
                    )
                except Exception:
                    pass
                return
            if not pages:
                time.sleep(0.005)


class Task:
    def __init__(self, task_id, pipelines, driver_counts, output_spec,
                 scheduler, transport, system_splits=(), splits_done=True,
                 remote_splits=None, scan_rows_per_sec=None,
                 exchange_rows_per_sec=None):
        self.id = task_id
        self.scheduler = scheduler
        self.transport = transport
        self.scan_rows_per_sec = scan_rows_per_sec
        self.exchange_rows_per_sec = exchange_rows_per_sec
        self.state = "planned"
        self.created_at = time.monotonic()
        self._lock = threading.RLock()
        self.pipelines = {p.pipeline_id: p for p in pipelines}
        self._live = {p.pipeline_id: [] for p in pipelines}
        self._done_counts = {p.pipeline_id: 0 for p in pipelines}
        self._rows_done = {p.pipeline_id: 0 for p in pipelines}
        self._concluded = {p.pipeline_id: False for p in pipelines}
        self._lex_index = {}  # driver id -> local exchange partition
        self._scan_ops = []
        self.fetchers = {}

        self.split_queue = SplitQueue(system_splits, done=splits_done)
        self._build_shared(pipelines)
        self.output_buffer = self._build_output(output_spec)

        remote_splits = remote_splits or {}
        for stage, entry in remote_splits.items():
            rbuf = self._rbufs[int(stage)]
            for rs in entry.get("splits", ()):
                self._start_fetcher(int(stage), rs)
            if entry.get("no_more"):
                rbuf.no_more_upstreams()

        drivers = []
        for p in pipelines:
            count = driver_counts.get(p.pipeline_id, 1)
            if count < 1:
                raise InvalidSpec(f"pipeline {p.pipeline_id} needs >= 1 driver")
            for _ in range(count):
                drivers.append(self._make_driver(p))
        self.state = "running"
        for d in drivers:
            scheduler.submit(d, self._driver_finished)

    # -- construction --------------------------------------------------

    def _build_shared(self, pipelines):
        self._rbufs = {}
        self._lex = {}
        self._handles = {}
        self._handle_refs = {}
        self._lex_join = {}  # lex id -> join id it feeds (if any)
        for p in pipelines:
            join_id = None
            for d in p.ops:
                if d["op"] == "exchange":
                    stage = d["source_stage"]
                    if stage not in self._rbufs:
                        self._rbufs[stage] = ExchangeReceiveBuffer()
                if d["op"] == "hash_build" or d["op"] == "hash_probe":
                    jid = d["join"]
                    if jid not in self._handles:
                        self._handles[jid] = HashTableHandle()
                        self._handle_refs[jid] = ops.HandleRef(self._handles[jid])
                    if d["op"] == "hash_build":
                        join_id = jid
            for d in p.ops:
                if d["op"] == "local_exchange_source" and join_id is not None:
                    self._lex_join[d["lex"]] = join_id
        # local exchanges sized to the initial source-pipeline driver count
        for p in pipelines:
            for d in p.ops:
                if d["op"] == "local_exchange_sink" and d["lex"] not in self._lex:
                    self._lex[d["lex"]] = LocalExchange(d["keys"], partition_count=0)

    def _build_output(self, spec):
        mode = spec.get("mode", "gather")
        ids = spec.get("buffer_ids", [0])
        cache = spec.get("cache", False)
        if mode == "shuffle":
            return ShuffleBuffer(spec["keys"], buffer_ids=ids, cache=cache)
        return SharedBuffer(mode, buffer_ids=ids, cache=cache)

    def _build_op(self, d, lex_partition):
        kind = d["op"]
        if kind == "table_scan":
            op = ops.TableScanOp(d["types"], self.split_queue,
                                 rows_per_sec=self.scan_rows_per_sec)
            self._scan_ops.append(op)
            return op
        if kind == "exchange":
            return ops.ExchangeOp(self._rbufs[d["source_stage"]],
                                  rows_per_sec=self.exchange_rows_per_sec)
        if kind == "filter":
            return ops.FilterOp(expr_from_json(d["predicate"]))
        if kind == "project":
            return ops.ProjectOp(
                [expr_from_json(e) for e in d["exprs"]], d["types"]
            )
        if kind == "partial_agg":
            aggs = [(a["func"], expr_from_json(a["arg"])) for a in d["aggs"]]
            return ops.PartialAggOp(d["keys"], aggs, d["out_types"])
        if kind == "final_agg":
            return ops.FinalAggOp(
                d["key_count"], [a["func"] for a in d["aggs"]], d["out_types"]
            )
        if kind == "sort":
            return ops.SortOp([(i, bool(a)) for i, a in d["keys"]])
        if kind == "limit":
            return ops.LimitOp(d["n"])
        if kind == "local_exchange_sink":
            return ops.LocalExchangeSinkOp(self._lex[d["lex"]])
        if kind == "local_exchange_source":
            return ops.LocalExchangeSourceOp(self._lex[d["lex"]], lex_partition)
        if kind == "hash_build":
            return ops.HashBuildOp(self._handles[d["join"]], d["keys"])
        if kind == "hash_probe":
            return ops.HashProbeOp(
                self._handle_refs[d["join"]], d["keys"],
                d["probe_types"], d["build_types"],
            )
        if kind == "task_output":
            return ops.TaskOutputOp(self.output_buffer)
        raise InvalidSpec(f"unknown operator kind {kind!r}")

    def _make_driver(self, pspec):
        start = time.perf_counter()
        lex_partition = None
        head = pspec.ops[0]
        if head["op"] == "local_exchange_source":
            lex_partition = self._lex[head["lex"]].add_partition()
        chain = [self._build_op(d, lex_partition) for d in pspec.ops]
        driver = Driver(chain, pipeline_id=pspec.pipeline_id)
        if lex_partition is not None:
            self._lex_index[driver.id] = lex_partition
        self._live[pspec.pipeline_id].append(driver)
        self.creation_ms = (time.perf_counter() - start) * 1e3
        return driver

    # -- lifecycle -----------------------------------------------------

    def _driver_finished(self, driver):
        with self._lock:
            live = self._live[driver.pipeline_id]
            if driver in live:
                live.remove(driver)
            self._done_counts[driver.pipeline_id] += 1
            self._rows_done[driver.pipeline_id] += driver.rows_out
            if not live:
                self._concluded[driver.pipeline_id] = True
            if all(self._concluded.values()) and self.state == "running":
                self.state = "finished"
                self._stop_fetchers()

    def _stop_fetchers(self):
        for f in self.fetchers.values():
            f.stop()

    @property
    def finished(self):
        return self.state == "finished"

    # -- control plane -------------------------------------------------

    def _start_fetcher(self, stage, remote):
        rbuf = self._rbufs[stage]
        key = (stage,) + remote.key
        if key in self.fetchers:
            return
        rbuf.add_upstream(remote.key)
        f = _Fetcher(self.transport, remote, self.id.seq, rbuf)
        self.fetchers[key] = f
        f.start()

    def update_splits(self, source_stage, add=(), remove=(), no_more=False):
        with self._lock:
            if self.state in ("finished", "aborted"):
                raise TaskFinished(str(self.id))
            rbuf = self._rbufs.get(source_stage)
            if rbuf is None:
                raise InvalidSpec(f"no exchange reads stage {source_stage}")
            for rs in add:
                self._start_fetcher(source_stage, rs)
            for rs in remove:
                key = (source_stage,) + rs.key
                f = self.fetchers.pop(key, None)
                if f:
                    f.stop()
                rbuf.remove_upstream(rs.key)
            if no_more:
                rbuf.no_more_upstreams()
        self.scheduler.wake_all()

    def add_system_splits(self, splits, done=False):
        with self._lock:
            self.split_queue.add(splits, done=done)
        self.scheduler.wake_all()

    def _build_join_of(self, pspec):
        """Join id whose build this pipeline belongs to, if any."""
        for d in pspec.ops:
            if d["op"] == "hash_build":
                return d["join"]
            if d["op"] == "local_exchange_sink":
                return self._lex_join.get(d["lex"])
        return None

    def tune_dop(self, pipeline_id, target):
        with self._lock:
            if self.state in ("finished", "aborted"):
                raise TaskFinished(str(self.id))
            pspec = self.pipelines.get(pipeline_id)
            if pspec is None:
                raise InvalidSpec(f"no pipeline {pipeline_id}")
            if pspec.elasticity == "fixed":
                raise PipelineFixed(f"pipeline {pipeline_id} is fixed")
            jid = self._build_join_of(pspec)
            if jid is not None and self._handles[jid].complete:
                raise PipelineFixed(
                    f"build pipeline {pipeline_id} fixed after hash table completion"
                )
            live = self._live[pipeline_id]
            if self._concluded[pipeline_id]:
                raise TaskFinished(f"pipeline {pipeline_id} already concluded")
            current = len(live)
            if target == current:
                return current
            if target < 1:
                raise InvalidSpec("driver count must stay >= 1")
            if target > current:
                new = [self._make_driver(pspec) for _ in range(target - current)]
                for d in new:
                    self.scheduler.submit(d, self._driver_finished)
            else:
                victims = live[target:]  # newest drivers wind down first
                for d in victims:
                    idx = self._lex_index.get(d.id)
                    if idx is not None:
                        self._lex[self.pipelines[pipeline_id].ops[0]["lex"]] \
                            .close_partition(idx)
                    else:
                        d.signal_end()
                    self.scheduler.wake(d)
            return target

    def destroy(self, mode="graceful"):
        with self._lock:
            if self.state in ("finished", "aborted"):
                return
            if mode == "abort":
                self.state = "aborted"
                self._stop_fetchers()
                for live in self._live.values():
                    for d in live:
                        self.scheduler.cancel(d)
                return
            # graceful: end signals at every pipeline head
            self.split_queue.close()
            for live in self._live.values():
                for d in live:
                    d.signal_end()
        self.scheduler.wake_all()

    # -- observation ---------------------------------------------------

    def info(self):
        with self._lock:
            pipelines = []
            for pid, pspec in sorted(self.pipelines.items()):
                live = self._live[pid]
                pipelines.append({
                    "id": pid,
                    "head": pspec.head_kind,
                    "tail": pspec.tail_kind,
                    "elasticity": pspec.elasticity,
                    "drivers": len(live),
                    "drivers_finished": self._done_counts[pid],
                    "concluded": self._concluded[pid],
                    "rows_out": self._rows_done[pid]
                                + sum(d.rows_out for d in live),
                })
            joins = {
                str(jid): {
                    "build_state": h.build_state,
                    "build_seconds": h.build_seconds(),
                    "rows": h.row_count() if h.complete else None,
                }
                for jid, h in self._handles.items()
            }
            exchanges = {
                str(stage): {
                    "turn_up": rb.turn_up_counter,
                    "rows_received": rb.rows_received,
                    "queued_bytes": rb.queued_bytes,
                    "complete": rb.is_complete(),
                    "upstreams": [task for _, task in rb.upstreams()],
                }
                for stage, rb in self._rbufs.items()
            }
            sq = self.split_queue
            return {
                "task": str(self.id),
                "state": self.state,
                "pipelines": pipelines,
                "scan": {
                    "splits_total": sq.total_added,
                    "splits_pending": sq.pending(),
                    "bytes_total": sq.total_bytes,
                    "bytes_claimed": sq.claimed_bytes,
                    "bytes_pending": sq.pending_bytes(),
                    "rows_scanned": sum(op._emitted_rows for op in self._scan_ops),
                    "exhausted": sq.exhausted(),
                },
                "output": {
                    "rows": getattr(self.output_buffer, "rows_enqueued", 0),
                    "pages": getattr(self.output_buffer, "pages_enqueued", 0),
                    "buffer_complete": self.output_buffer.is_complete(),
                    "buffer_ids": self.output_buffer.buffer_ids(),
                },
                "joins": joins,
                "exchanges": exchanges,
            }
