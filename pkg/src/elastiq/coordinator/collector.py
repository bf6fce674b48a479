"""Runtime information collection.

Once per second the collector polls every task of every running query
and folds the task snapshots into per-stage aggregates:

* output throughput (rows/s, summed over the stage's tasks) with a ring
  of recent samples per stage;
* scan progress: bytes remaining and the consumption rate over a sliding
  window, which the tuner turns into a remaining-time estimate;
* hash-table build time (max over the stage's tasks);
* receive-buffer turn-up counters, the bottleneck signal.

A task that fails three consecutive probes is considered lost and fails
its query.
"""

from __future__ import annotations

import threading
import time

from .execution import CONSUME_WINDOW

COLLECT_PERIOD = 1.0
MAX_FAILURES = 3


def collect_query(execution):
    """One collection round for one query; returns the stage aggregates
    that were stored on the execution's stages."""
    if execution.state != "running":
        return {}  # tasks are torn down at completion; nothing to probe
    now = time.monotonic()
    snapshot = {}
    for sid, st in execution.stages.items():
        infos = {}
        for t in st.all_tasks():
            try:
                infos[t.task_str] = t.worker.task_info(t.task_str)
                t.failures = 0
            except Exception as exc:  # noqa: BLE001
                t.failures += 1
                if t.failures >= MAX_FAILURES and execution.state == "running":
                    execution.fail(
                        f"task {t.task_str} unreachable: {exc}"
                    )
                    return {}
        st.last_info = infos

        # monotone output row counter survives task turnover
        for task_str, info in infos.items():
            seen = st._rows_seen.get(task_str, 0)
            rows = info["output"]["rows"]
            if rows > seen:
                st.rows_total += rows - seen
            st._rows_seen[task_str] = rows

        throughput = 0.0
        if st.samples:
            prev = st.samples[-1]
            dt = now - prev["ts"]
            if dt > 0:
                throughput = (st.rows_total - prev["rows_total"]) / dt

        scan = None
        r_consume = None
        if infos and st.frag.is_scan_stage():
            total = sum(i["scan"]["bytes_total"] for i in infos.values())
            pending = sum(i["scan"]["bytes_pending"] for i in infos.values())
            claimed = sum(i["scan"]["bytes_claimed"] for i in infos.values())
            st.claimed_window.append((now, claimed))
            while (st.claimed_window
                   and now - st.claimed_window[0][0] > CONSUME_WINDOW):
                st.claimed_window.popleft()
            t0, c0 = st.claimed_window[0]
            if now > t0:
                r_consume = (claimed - c0) / (now - t0)
            scan = {
                "bytes_total": total,
                "bytes_pending": pending,
                "bytes_claimed": claimed,
                "progress": 1.0 if total == 0 else (total - pending) / total,
                "rows_scanned": sum(
                    i["scan"]["rows_scanned"] for i in infos.values()
                ),
            }

        t_build = None
        builds = [
            j["build_seconds"]
            for i in infos.values()
            for j in i["joins"].values()
            if j["build_seconds"] is not None
        ]
        if builds:
            t_build = max(builds)

        turn_up = {}
        for task_str, info in infos.items():
            for src, ex in info["exchanges"].items():
                turn_up.setdefault(int(src), {})[task_str] = ex["turn_up"]

        drivers = {
            task_str: sum(p["drivers"] for p in info["pipelines"])
            for task_str, info in infos.items()
        }

        sample = {
            "ts": now,
            "rows_total": st.rows_total,
            "throughput": throughput,
            "scan": scan,
            "r_consume": r_consume,
            "t_build": t_build,
            "turn_up": turn_up,
            "drivers": drivers,
            "states": {k: i["state"] for k, i in infos.items()},
        }
        st.samples.append(sample)
        snapshot[sid] = sample
    return snapshot


class Collector(threading.Thread):
    def __init__(self, coordinator, period=COLLECT_PERIOD):
        super().__init__(daemon=True, name="collector")
        self.coordinator = coordinator
        self.period = period
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def run(self):
        while not self._stop.wait(self.period):
            for execution in self.coordinator.running_queries():
                try:
                    collect_query(execution)
                except Exception:  # noqa: BLE001
                    pass  # a tuning op may tear tasks down mid-round
