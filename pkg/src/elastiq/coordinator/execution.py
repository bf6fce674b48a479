"""Per-query execution state and runtime tuning operations.

A query runs as a tree of stages; each stage runs as a group of tasks
spread over workers.  Tasks are created bottom-up (children before
parents) so every exchange has its upstream addresses at creation time.
All tuning operations preserve the query result: they only change where
and how wide the same dataflow runs.

Tuning operations per stage kind:

* any stage, any task: intra-task driver count (``set_task_dop``);
* elastic non-join stages (inserted shuffle stages) and broadcast-join
  stages: ``add_stage_task`` / ``remove_stage_task``;
* partitioned-join stages: ``dop_switch`` — a new task group builds its
  hash tables from the build side's page cache while the old group keeps
  probing; once built, the probe streams are repointed atomically at a
  page boundary, so data processing never pauses.
"""

from __future__ import annotations

import threading
import time
from collections import deque

from ..errors import (
    FilterRejected,
    LastTask,
    QueryFinished,
    StageFixed,
    TaskFinished,
    UnknownQuery,
)
from ..plan import build_pipelines
from ..plan.fragments import ExchangeSource, walk_fragment
from ..plan.physical import TableScan
from ..worker.task import RemoteSplit

SAMPLE_RING = 600  # per-stage runtime samples kept (~10 min at 1 Hz)
CONSUME_WINDOW = 10.0  # seconds of scan history behind R_consume


class TaskHandle:
    def __init__(self, query_id, stage, seq, worker):
        self.query_id = query_id
        self.stage = stage
        self.seq = seq
        self.worker = worker
        self.failures = 0  # consecutive collector probe failures

    @property
    def task_str(self):
        return f"{self.query_id}.{self.stage}_{self.seq}"

    @property
    def address(self):
        return RemoteSplit(self.worker.url, self.task_str)

    def __repr__(self):
        return f"TaskHandle({self.task_str}@{self.worker.url})"


class StageExecution:
    def __init__(self, frag, pipelines, planned_dop, task_dop):
        self.frag = frag
        self.pipelines = pipelines
        self.planned_dop = planned_dop
        self.task_dop = task_dop  # initial drivers per tunable pipeline
        self.tasks = []  # active task group
        self.building = []  # incoming group during a DOP switch
        self.next_seq = 0
        # collector state
        self.samples = deque(maxlen=SAMPLE_RING)
        self.rows_total = 0
        self._rows_seen = {}  # task_str -> last observed output rows
        self.claimed_window = deque()  # (ts, claimed_bytes) for R_consume
        self.last_info = {}  # task_str -> last task_info snapshot

    @property
    def sid(self):
        return self.frag.id

    def all_tasks(self):
        return list(self.tasks) + list(self.building)

    def take_seq(self):
        seq = self.next_seq
        self.next_seq += 1
        return seq

    def kind(self):
        if self.frag.has_partitioned_join():
            return "partitioned-join"
        if self.frag.has_join():
            return "broadcast-join"
        if self.frag.is_scan_stage():
            return "scan"
        return "exchange"


def _partitioning_to_output(partitioning, cache):
    kind = partitioning.get("kind", "gather")
    if kind == "hash":
        return {"mode": "shuffle", "keys": list(partitioning["keys"]),
                "cache": cache}
    if kind == "broadcast":
        return {"mode": "broadcast", "cache": cache}
    return {"mode": "gather", "cache": cache}


class QueryExecution:
    def __init__(self, query_id, sql, tree, schema, pool, catalog,
                 task_dop=1, stage_dop=None, latency_constraint=None,
                 scan_rows_per_sec=None, stage_rows_per_sec=None):
        self.id = query_id
        self.sql = sql
        self.tree = tree
        self.schema = schema  # [(column-name, column-type)] of the result
        self.pool = pool
        self.catalog = catalog
        self.scan_rows_per_sec = scan_rows_per_sec
        # per-stage exchange-source throttle (sid -> rows/s per driver),
        # used to emulate deterministic per-driver compute cost
        self.stage_rows_per_sec = stage_rows_per_sec or {}
        self.latency_constraint = latency_constraint
        self.state = "planned"
        self.error = None
        self.submitted_at = time.time()
        self.started = time.monotonic()
        self.finished_at = None
        self.events = []
        self.result_rows = None
        self.lock = threading.RLock()  # serializes tuning commands
        stage_dop = stage_dop or {}
        self.stages = {}
        for sid, frag in tree.stages.items():
            dop = 1 if frag.elasticity_class == "fixed-one" \
                else int(stage_dop.get(sid, 1))
            self.stages[sid] = StageExecution(
                frag, build_pipelines(frag), dop, task_dop
            )
        self._drain_thread = None

    # -- helpers -------------------------------------------------------

    def event(self, kind, **detail):
        self.events.append({"ts": time.time(), "kind": kind, **detail})

    def elapsed(self):
        end = self.finished_at if self.finished_at is not None \
            else time.monotonic()
        return end - self.started

    def _parent_stage(self, sid):
        pid = self.tree.parent_of(sid)
        return None if pid is None else self.stages[pid]

    def _check_running(self):
        if self.state != "running":
            raise QueryFinished(f"query {self.id} is {self.state}")

    def _scan_splits(self, frag):
        for node in walk_fragment(frag.plan):
            if isinstance(node, TableScan):
                return self.catalog.table(node.table).splits
        return []

    def _driver_counts(self, st):
        return {
            p.pipeline_id: (1 if p.elasticity == "fixed" else st.task_dop)
            for p in st.pipelines
        }

    def _task_spec(self, st, seq, output_ids, remote_splits,
                   system_splits=(), splits_done=True):
        return {
            "task_id": {"query": self.id, "stage": st.sid, "seq": seq},
            "pipelines": [p.to_json() for p in st.pipelines],
            "driver_counts": {
                str(k): v for k, v in self._driver_counts(st).items()
            },
            "output": dict(
                _partitioning_to_output(
                    st.frag.output_partitioning, st.frag.cache_pages
                ),
                buffer_ids=list(output_ids),
            ),
            "system_splits": [s.to_json() for s in system_splits],
            "splits_done": splits_done,
            "remote_splits": {
                str(sid): {
                    "splits": [rs.to_json() for rs in entry["splits"]],
                    "no_more": entry.get("no_more", True),
                }
                for sid, entry in remote_splits.items()
            },
            "scan_rows_per_sec": self.scan_rows_per_sec,
            "exchange_rows_per_sec": self.stage_rows_per_sec.get(st.sid),
        }

    def _child_addresses(self, sid):
        return [t.address for t in self.stages[sid].tasks]

    def _wait(self, pred, timeout, what):
        deadline = time.monotonic() + timeout
        while not pred():
            if time.monotonic() >= deadline:
                raise TimeoutError(f"timed out waiting for {what}")
            time.sleep(0.01)

    # -- submission ----------------------------------------------------

    def start(self):
        """Create all tasks bottom-up: every child stage is fully running
        before its parent is created, so exchanges never see a partial
        upstream set."""
        order = []

        def postorder(sid):
            for cid in self.tree.stages[sid].inputs:
                postorder(cid)
            order.append(sid)

        postorder(self.tree.root_stage_id)
        for sid in order:
            st = self.stages[sid]
            parent = self._parent_stage(sid)
            output_ids = [0] if parent is None \
                else list(range(parent.planned_dop))
            remote = {
                cid: {"splits": self._child_addresses(cid), "no_more": True}
                for cid in st.frag.inputs
            }
            splits = self._scan_splits(st.frag)
            for i in range(st.planned_dop):
                seq = st.take_seq()
                worker = self.pool.pick()
                spec = self._task_spec(
                    st, seq, output_ids, remote,
                    system_splits=splits[i::st.planned_dop],
                    splits_done=True,
                )
                worker.create_task(spec)
                st.tasks.append(TaskHandle(self.id, sid, seq, worker))
        self.state = "running"
        self.event("submitted", stages={
            sid: st.planned_dop for sid, st in self.stages.items()
        })
        self._drain_thread = threading.Thread(
            target=self._drain_results, daemon=True,
            name=f"drain-{self.id}",
        )
        self._drain_thread.start()

    def _drain_results(self):
        root = self.stages[self.tree.root_stage_id].tasks[0]
        token = 0
        rows = []
        while self.state == "running":
            try:
                pages, token, complete = root.worker.get_results(
                    root.task_str, 0, token
                )
            except Exception as exc:  # noqa: BLE001
                if self.state == "running":
                    self.fail(f"result fetch failed: {exc}")
                return
            rows.extend(
                r for p in pages if not p.is_end for r in p.to_rows()
            )
            if complete:
                try:  # final ack frees the worker-side pages
                    root.worker.get_results(root.task_str, 0, token)
                except Exception:  # noqa: BLE001
                    pass
                with self.lock:
                    if self.state == "running":
                        self.result_rows = rows
                        self.state = "finished"
                        self.finished_at = time.monotonic()
                        self.event("finished",
                                   rows=len(rows), seconds=self.elapsed())
                self._teardown()
                return
            if not pages:
                time.sleep(0.005)

    def _teardown(self):
        """Destroy every remaining task on the workers once the result
        set is in hand, so nothing lingers after completion."""
        with self.lock:
            for st in self.stages.values():
                for t in st.all_tasks():
                    try:
                        t.worker.forget_task(t.task_str)
                    except Exception:  # noqa: BLE001
                        pass
        self._release_all()

    def _release_all(self):
        for st in self.stages.values():
            for t in st.all_tasks():
                self.pool.release(t.worker.url)

    # -- stage task add / remove ---------------------------------------

    def _check_elastic_for_group_change(self, st):
        if st.frag.elasticity_class == "fixed-one":
            raise StageFixed(f"stage {st.sid} runs with parallelism 1")
        if st.frag.has_partitioned_join():
            raise StageFixed(
                f"stage {st.sid} holds partitioned join state; "
                "change its parallelism with a DOP switch"
            )
        if st.frag.is_scan_stage():
            raise StageFixed(
                f"stage {st.sid} is bound to its table's data placement; "
                "tune its task DOP or insert a shuffle stage instead"
            )
        parent = self._parent_stage(st.sid)
        if parent is not None and parent.building:
            raise StageFixed(
                f"stage {parent.sid} is mid DOP switch; retry later"
            )

    def add_stage_task(self, sid):
        """Grow a stage by one task (three-step wiring protocol):
        1. create the task (its exchanges start out without upstreams);
        2. announce its address to the parent tasks;
        3. add its buffer id at every child task's output buffer, then
           hand it the child addresses.
        A broadcast-building child replays its page cache into the new
        id so the new task can build its own hash table."""
        with self.lock:
            self._check_running()
            st = self.stages[sid]
            self._check_elastic_for_group_change(st)
            parent = self._parent_stage(sid)
            seq = st.take_seq()
            worker = self.pool.pick()
            output_ids = [0] if parent is None \
                else [t.seq for t in parent.tasks]
            worker.create_task(self._task_spec(st, seq, output_ids, {}))
            handle = TaskHandle(self.id, sid, seq, worker)
            announced = []
            try:
                if parent is not None:
                    for pt in parent.tasks:
                        try:
                            pt.worker.update_splits(
                                pt.task_str, sid, add=[handle.address]
                            )
                            announced.append(pt)
                        except TaskFinished:
                            # a finished parent already saw all its inputs
                            # end; it needs no new upstream — and will
                            # never fetch its stream, so drop the id
                            worker.output_buffers(handle.task_str, {
                                "op": "remove", "buffer_id": pt.seq,
                            })
                            continue
                for cid in st.frag.inputs:
                    child = self.stages[cid]
                    replay = child.frag.cache_pages
                    for ct in child.tasks:
                        ct.worker.output_buffers(ct.task_str, {
                            "op": "add", "buffer_id": seq, "replay": replay,
                        })
                    worker.update_splits(
                        handle.task_str, cid,
                        add=self._child_addresses(cid), no_more=True,
                    )
            except TaskFinished:
                # undo partial wiring: parents that learned the address
                # must forget it, or they wait forever for its end page
                for pt in announced:
                    try:
                        pt.worker.update_splits(
                            pt.task_str, sid, remove=[handle.address]
                        )
                    except TaskFinished:
                        pass
                worker.forget_task(handle.task_str, "abort")
                self.pool.release(worker.url)
                raise QueryFinished(
                    f"stage {sid} finished while adding a task"
                ) from None
            st.tasks.append(handle)
            self.event("add_task", stage=sid, task=handle.task_str)
            return handle.task_str

    def remove_stage_task(self, sid, seq=None, timeout=30.0):
        """Shrink a stage by one task.  The victim's streams at every
        child output buffer are ended; the victim drains what it already
        received, flushes, and finishes on its own; only then is its
        address withdrawn — no delivered row is lost or duplicated."""
        with self.lock:
            self._check_running()
            st = self.stages[sid]
            self._check_elastic_for_group_change(st)
            if len(st.tasks) < 2:
                raise LastTask(f"stage {sid} has a single task")
            victim = st.tasks[-1] if seq is None else next(
                t for t in st.tasks if t.seq == seq
            )
            for cid in st.frag.inputs:
                for ct in self.stages[cid].tasks:
                    ct.worker.output_buffers(ct.task_str, {
                        "op": "finish", "buffer_id": victim.seq,
                    })
            # wait until the victim's drivers are done AND every page it
            # produced has been delivered and acknowledged downstream;
            # withdrawing the address earlier would discard in-flight pages
            def _drained():
                info = victim.worker.task_info(victim.task_str)
                return (info["state"] == "finished"
                        and info["output"]["buffer_complete"])

            self._wait(_drained, timeout,
                       f"task {victim.task_str} to wind down")
            parent = self._parent_stage(sid)
            if parent is not None:
                for pt in parent.tasks:
                    try:
                        pt.worker.update_splits(
                            pt.task_str, sid, remove=[victim.address]
                        )
                    except TaskFinished:
                        pass
            for cid in st.frag.inputs:
                for ct in self.stages[cid].tasks:
                    try:
                        ct.worker.output_buffers(ct.task_str, {
                            "op": "remove", "buffer_id": victim.seq,
                        })
                    except TaskFinished:
                        pass
            victim.worker.forget_task(victim.task_str)
            st.tasks.remove(victim)
            st._rows_seen.pop(victim.task_str, None)
            self.pool.release(victim.worker.url)
            self.event("remove_task", stage=sid, task=victim.task_str)
            return victim.task_str

    # -- DOP switch ----------------------------------------------------

    def _split_children(self, st):
        build, probe = [], []
        for node in walk_fragment(st.frag.plan):
            if isinstance(node, ExchangeSource):
                (build if node.for_build else probe).append(node.stage_id)
        return build, probe

    def dop_switch(self, sid, new_dop, build_timeout=60.0,
                   drain_timeout=60.0):
        """Change a partitioned-join stage's DOP without pausing the
        probe: a new task group builds from the build side's page cache
        in the background, then the probe streams are switched to it at
        a page boundary and the old group drains and retires."""
        with self.lock:
            self._check_running()
            st = self.stages[sid]
            if not st.frag.has_partitioned_join():
                raise StageFixed(
                    f"stage {sid} has no partitioned join; "
                    "a DOP switch does not apply"
                )
            new_dop = int(new_dop)
            if new_dop < 1:
                raise FilterRejected("stage DOP must stay >= 1")
            if new_dop == len(st.tasks):
                raise FilterRejected(
                    f"stage {sid} already runs {new_dop} tasks"
                )
            if st.building:
                raise StageFixed(f"stage {sid} is already mid switch")
            t0 = time.monotonic()
            build_children, probe_children = self._split_children(st)
            parent = self._parent_stage(sid)
            old = list(st.tasks)
            old_group = [t.seq for t in old]
            output_ids = [0] if parent is None \
                else [t.seq for t in parent.tasks]

            # (1) new group, wired to the build side only for now
            remote = {
                cid: {"splits": self._child_addresses(cid), "no_more": True}
                for cid in build_children
            }
            new = []
            for _ in range(new_dop):
                seq = st.take_seq()
                worker = self.pool.pick()
                worker.create_task(
                    self._task_spec(st, seq, output_ids, remote)
                )
                new.append(TaskHandle(self.id, sid, seq, worker))
            st.building = new
            new_group = [t.seq for t in new]

            # (2) build children replay their page caches to the new group
            for cid in build_children:
                for ct in self.stages[cid].tasks:
                    ct.worker.output_buffers(ct.task_str, {
                        "op": "reshuffle", "group": new_group,
                    })

            # (3) wait for every new task to finish building
            def built():
                for t in new:
                    info = t.worker.task_info(t.task_str)
                    if any(j["build_state"] != "complete"
                           for j in info["joins"].values()):
                        return False
                return True

            self._wait(built, build_timeout, f"stage {sid} hash tables")
            t_built = time.monotonic()
            build_seconds = max(
                j["build_seconds"]
                for t in new
                for j in t.worker.task_info(t.task_str)["joins"].values()
            )

            # (4) parents learn the new addresses before the old group can
            #     end, so their exchanges never see a completed-but-partial
            #     upstream set
            if parent is not None:
                for pt in parent.tasks:
                    try:
                        pt.worker.update_splits(
                            pt.task_str, sid, add=[t.address for t in new]
                        )
                    except TaskFinished:
                        # a finished parent needs no new upstream and
                        # will never fetch its stream from the new group
                        for t in new:
                            t.worker.output_buffers(t.task_str, {
                                "op": "remove", "buffer_id": pt.seq,
                            })
                        continue

            # (5) atomic page-boundary repoint of the probe streams
            for cid in probe_children:
                for ct in self.stages[cid].tasks:
                    ct.worker.output_buffers(ct.task_str, {
                        "op": "switch", "group": new_group,
                    })
            for t in new:
                for cid in probe_children:
                    t.worker.update_splits(
                        t.task_str, cid,
                        add=self._child_addresses(cid), no_more=True,
                    )
            switch_seconds = time.monotonic() - t_built
            st.tasks = new
            st.building = old  # old group still drains; keep it observed

            # (6) old group drains its delivered pages and retires; its
            # output must be fully fetched and acknowledged before the
            # parents drop the addresses, or in-flight pages would be lost
            def drained():
                for t in old:
                    info = t.worker.task_info(t.task_str)
                    if (info["state"] != "finished"
                            or not info["output"]["buffer_complete"]):
                        return False
                return True

            self._wait(drained, drain_timeout,
                       f"stage {sid} old group to drain")
            if parent is not None:
                for pt in parent.tasks:
                    try:
                        pt.worker.update_splits(
                            pt.task_str, sid,
                            remove=[t.address for t in old],
                        )
                    except TaskFinished:
                        pass
            for cid in build_children + probe_children:
                for ct in self.stages[cid].tasks:
                    try:
                        ct.worker.output_buffers(ct.task_str, {
                            "op": "retire", "group": old_group,
                        })
                    except TaskFinished:
                        pass
            for t in old:
                t.worker.forget_task(t.task_str)
                st._rows_seen.pop(t.task_str, None)
                self.pool.release(t.worker.url)
            st.building = []
            self.event(
                "dop_switch", stage=sid,
                from_dop=len(old), to_dop=new_dop,
                build_seconds=round(build_seconds, 4),
                switch_seconds=round(switch_seconds, 4),
                total_seconds=round(time.monotonic() - t0, 4),
            )
            return {
                "stage": sid, "from": len(old), "to": new_dop,
                "build_seconds": build_seconds,
                "switch_seconds": switch_seconds,
                "total_seconds": time.monotonic() - t0,
            }

    # -- intra-task DOP ------------------------------------------------

    def set_task_dop(self, sid, target, pipeline_id=None, seq=None):
        """Change the driver count of the stage's tunable pipelines (or
        one specific pipeline) on all tasks (or one specific task)."""
        with self.lock:
            self._check_running()
            st = self.stages[sid]
            if pipeline_id is None:
                pids = [p.pipeline_id for p in st.pipelines
                        if p.elasticity == "tunable"]
                if not pids:
                    raise StageFixed(f"stage {sid} has no tunable pipeline")
            else:
                pids = [int(pipeline_id)]
            tasks = st.tasks if seq is None \
                else [t for t in st.tasks if t.seq == seq]
            applied = {}
            for t in tasks:
                for pid in pids:
                    try:
                        applied[f"{t.task_str}:{pid}"] = \
                            t.worker.tune_task_dop(
                                t.task_str, pid, int(target)
                            )
                    except TaskFinished:
                        pass  # already wound down; nothing to tune
            if seq is None:
                st.task_dop = int(target)
            self.event("task_dop", stage=sid, target=int(target),
                       pipelines=pids)
            return applied

    def tune_stage_dop(self, sid, target):
        """Stage-level DOP change dispatched by stage kind."""
        st = self.stages[sid]
        target = int(target)
        if st.frag.has_partitioned_join():
            return self.dop_switch(sid, target)
        delta = target - len(st.tasks)
        if delta == 0:
            raise FilterRejected(f"stage {sid} already runs {target} tasks")
        for _ in range(delta):
            self.add_stage_task(sid)
        for _ in range(-delta):
            self.remove_stage_task(sid)
        return {"stage": sid, "dop": target}

    # -- lifecycle -----------------------------------------------------

    def cancel(self):
        with self.lock:
            if self.state not in ("running", "planned"):
                return
            self.state = "canceled"
            self.finished_at = time.monotonic()
            for st in self.stages.values():
                for t in st.all_tasks():
                    try:
                        t.worker.forget_task(t.task_str, "abort")
                    except Exception:  # noqa: BLE001
                        pass
            self._release_all()
            self.event("canceled")

    def fail(self, reason):
        with self.lock:
            if self.state != "running":
                return
            self.state = "failed"
            self.error = reason
            self.finished_at = time.monotonic()
            for st in self.stages.values():
                for t in st.all_tasks():
                    try:
                        t.worker.forget_task(t.task_str, "abort")
                    except Exception:  # noqa: BLE001
                        pass
            self._release_all()
            self.event("failed", reason=reason)

    # -- invariant auditing -------------------------------------------

    def audit_addresses(self):
        """Address symmetry: for every stage edge, the parent tasks fetch
        from exactly the child stage's active tasks, and every child task
        serves a buffer id for every active parent task.  Returns a list
        of violations (empty = consistent)."""
        problems = []
        for sid, st in self.stages.items():
            if self.state != "running":
                break
            if st.building or any(
                self.stages[cid].building for cid in st.frag.inputs
            ):
                continue  # group change in flight; addresses are moving
            child_tasks = {t.task_str for t in st.tasks}
            parent = self._parent_stage(sid)
            consumers = [None] if parent is None else parent.tasks
            for pt in consumers:
                if pt is None:
                    continue
                try:
                    info = pt.worker.task_info(pt.task_str)
                except Exception:  # noqa: BLE001
                    continue
                ups = set(info["exchanges"].get(str(sid), {})
                          .get("upstreams", ()))
                if ups != child_tasks:
                    problems.append(
                        f"{pt.task_str} reads stage {sid} from {sorted(ups)}"
                        f" but its active tasks are {sorted(child_tasks)}"
                    )
            want_ids = {0} if parent is None \
                else {t.seq for t in parent.tasks}
            for ct in st.tasks:
                try:
                    info = ct.worker.task_info(ct.task_str)
                except Exception:  # noqa: BLE001
                    continue
                have = set(info["output"]["buffer_ids"])
                if not want_ids <= have:
                    problems.append(
                        f"{ct.task_str} serves ids {sorted(have)} but the"
                        f" consumers need {sorted(want_ids)}"
                    )
        return problems

    def liveness_report(self):
        """Task states as the workers see them; after a query finishes
        every task must have wound down on its own."""
        report = {}
        for st in self.stages.values():
            for t in st.all_tasks():
                try:
                    report[t.task_str] = \
                        t.worker.task_info(t.task_str)["state"]
                except UnknownQuery:
                    report[t.task_str] = "released"
                except Exception as exc:  # noqa: BLE001
                    report[t.task_str] = f"unreachable: {exc}"
        return report
