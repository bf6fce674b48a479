"""Coordinator: query admission, planning, placement, tuning, HTTP API.

The coordinator owns the catalog and the worker pool.  Each submitted
query becomes a QueryExecution; tuning commands are serialized per query
and never pause data processing.  The HTTP API is the only interface the
command-line client and the web console use.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import mimetypes
import os
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from ..catalog import Catalog
from ..errors import (
    ElastiqError,
    FilterRejected,
    LastTask,
    NoWorkers,
    QueryFinished,
    StageFixed,
    UnknownQuery,
)
from ..plan import fragment, insert_shuffle_stage, to_physical
from ..plan.physical import DEFAULT_BROADCAST_THRESHOLD
from ..sql import bind, parse
from .collector import Collector, collect_query
from .execution import QueryExecution
from .workers import HttpWorker, WorkerPool


class Coordinator:
    def __init__(self, catalog, pool=None, collect_period=1.0,
                 monitor_period=None):
        self.catalog = catalog
        self.pool = pool if pool is not None else WorkerPool(heartbeat=True)
        self.queries = {}
        self._counter = 0
        self._lock = threading.Lock()
        self.collector = Collector(self, period=collect_period)
        self.collector.start()
        self.monitor_period = monitor_period
        self.monitor = None

    # -- queries -------------------------------------------------------

    def plan(self, sql, options=None):
        """Plan only; returns the stage tree (with pipelines) as JSON."""
        options = options or {}
        tree, schema = self._plan(sql, options)
        doc = tree.to_json()
        from ..plan import build_pipelines
        for entry in doc["stages"]:
            frag = tree.stages[entry["id"]]
            entry["pipelines"] = [
                p.to_json() for p in build_pipelines(frag)
            ]
            entry["kind"] = (
                "partitioned-join" if frag.has_partitioned_join()
                else "broadcast-join" if frag.has_join()
                else "scan" if frag.is_scan_stage() else "exchange"
            )
        doc["schema"] = [list(c) for c in schema]
        return doc

    def _plan(self, sql, options):
        bound = bind(parse(sql), self.catalog)
        threshold = options.get(
            "broadcast_threshold", DEFAULT_BROADCAST_THRESHOLD
        )
        tree = fragment(to_physical(bound, self.catalog,
                                    broadcast_threshold=threshold))
        for sid in options.get("insert_shuffle", ()):
            tree = insert_shuffle_stage(tree, int(sid))
        return tree, list(bound.schema)

    def submit(self, sql, options=None):
        options = options or {}
        tree, schema = self._plan(sql, options)
        with self._lock:
            self._counter += 1
            qid = f"q{self._counter}"
        stage_dop = {
            int(k): int(v)
            for k, v in (options.get("stage_dop") or {}).items()
        }
        execution = QueryExecution(
            qid, sql, tree, schema, self.pool, self.catalog,
            task_dop=int(options.get("task_dop", 1)),
            stage_dop=stage_dop,
            latency_constraint=options.get("latency_constraint"),
            scan_rows_per_sec=options.get("scan_rows_per_sec"),
            stage_rows_per_sec={
                int(k): float(v)
                for k, v in (options.get("stage_rows_per_sec") or {}).items()
            },
        )
        self.queries[qid] = execution
        execution.start()
        return execution

    def query(self, qid):
        try:
            return self.queries[qid]
        except KeyError:
            raise UnknownQuery(f"no query {qid}") from None

    def running_queries(self):
        return [q for q in self.queries.values() if q.state == "running"]

    # -- tuning --------------------------------------------------------

    def tune(self, qid, command):
        """Apply one tuning command; commands of one query serialize on
        the execution lock and leave the result set unchanged."""
        q = self.query(qid)
        op = command.get("op")
        sid = int(command["stage"]) if "stage" in command else None
        if op == "task_dop":
            return q.set_task_dop(
                sid, command["target"],
                pipeline_id=command.get("pipeline"),
                seq=command.get("seq"),
            )
        if op == "add_task":
            return {"task": q.add_stage_task(sid)}
        if op == "remove_task":
            return {"task": q.remove_stage_task(sid, command.get("seq"))}
        if op == "dop_switch":
            return q.dop_switch(sid, command["target"])
        if op == "stage_dop":
            return q.tune_stage_dop(sid, command["target"])
        if op == "direct":
            from ..autotuner import direct_tune
            return direct_tune(self, qid, sid, command["target"])
        if op == "one_time":
            from ..autotuner import plan_one_time
            return plan_one_time(self, qid, command["constraint"])
        if op == "constraint":
            q.latency_constraint = float(command["seconds"])
            q.event("constraint", seconds=q.latency_constraint)
            return {"latency_constraint": q.latency_constraint}
        if op == "monitor":
            from ..autotuner import disable_monitor, enable_monitor
            if command.get("enable", True):
                enable_monitor(q, command.get("constraint"))
                self._ensure_monitor()
            else:
                disable_monitor(q)
            return {"monitor": bool(command.get("enable", True))}
        raise ValueError(f"unknown tuning op {op!r}")

    def _ensure_monitor(self):
        from ..autotuner import MONITOR_PERIOD, Monitor
        if self.monitor is None:
            self.monitor = Monitor(
                self, period=self.monitor_period or MONITOR_PERIOD
            )
            self.monitor.start()

    def whatif(self, qid, stage, target):
        from ..autotuner import predict_with_dop
        return predict_with_dop(self.query(qid), int(stage), int(target))

    # -- status --------------------------------------------------------

    def query_status(self, qid, series=False):
        from ..autotuner import estimate_remaining, locate_bottleneck
        q = self.query(qid)
        try:
            bottleneck = [list(b) for b in locate_bottleneck(q)]
        except ElastiqError:
            bottleneck = []  # not enough samples yet
        stages = {}
        scan_progress = []
        for sid, st in q.stages.items():
            last = st.samples[-1] if st.samples else None
            entry = {
                "kind": st.kind(),
                "dop": len(st.tasks),
                "building": len(st.building),
                "task_dop": st.task_dop,
                "tasks": [t.task_str for t in st.tasks],
                "elasticity": st.frag.elasticity_class,
                "rows_total": st.rows_total,
                "throughput": last["throughput"] if last else 0.0,
                "t_build": last["t_build"] if last else None,
                "scan": last["scan"] if last else None,
                "r_consume": last["r_consume"] if last else None,
                "states": last["states"] if last else {},
            }
            if q.state == "running":
                try:
                    entry["t_remain"] = round(estimate_remaining(q, sid), 3)
                except ElastiqError:
                    entry["t_remain"] = None
            else:
                entry["t_remain"] = 0.0
            if last and last["scan"]:
                scan_progress.append(last["scan"]["progress"])
            if series:
                entry["series"] = [
                    [round(s["ts"] - q.started, 3), round(s["throughput"], 3)]
                    for s in st.samples
                ]
            stages[sid] = entry
        return {
            "query": q.id,
            "sql": q.sql,
            "state": q.state,
            "error": q.error,
            "submitted_at": q.submitted_at,
            "elapsed": round(q.elapsed(), 3),
            "latency_constraint": q.latency_constraint,
            "progress": (sum(scan_progress) / len(scan_progress)
                         if scan_progress else None),
            "schema": [list(c) for c in q.schema],
            "result_rows": (len(q.result_rows)
                            if q.result_rows is not None else None),
            "bottleneck": bottleneck,
            "stages": stages,
            "events": list(q.events),
        }

    def results(self, qid, timeout=0.0):
        q = self.query(qid)
        deadline = time.monotonic() + timeout
        while q.state == "running" and time.monotonic() < deadline:
            time.sleep(0.02)
        if q.state == "failed":
            raise ElastiqError(q.error or "query failed")
        if q.state == "canceled":
            raise ElastiqError("query canceled")
        if q.result_rows is None:
            return None
        return q.result_rows

    def collect_now(self, qid):
        """Synchronous collection round (tests and the tuner use this to
        avoid waiting for the periodic tick)."""
        return collect_query(self.query(qid))

    def cancel(self, qid):
        self.query(qid).cancel()

    def shutdown(self):
        self.collector.stop()
        if self.monitor is not None:
            self.monitor.stop()
        for q in self.queries.values():
            if q.state == "running":
                q.cancel()
        self.pool.shutdown()


# -- HTTP layer --------------------------------------------------------------

_QUERY_SUB = re.compile(r"^/v1/query/([^/]+)(?:/(\w+))?$")


def make_handler(coordinator, ui_dir=None):
    if ui_dir:
        ui_dir = os.path.abspath(ui_dir)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _send(self, code, body, ctype="application/json"):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _json(self, code, obj):
            self._send(code, json.dumps(obj).encode())

        def _read_body(self):
            n = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(n) or b"{}")

        def _fail(self, exc):
            code = 500
            if isinstance(exc, UnknownQuery):
                code = 404
            elif isinstance(exc, (StageFixed, LastTask, QueryFinished,
                                  FilterRejected)):
                code = 409
            elif isinstance(exc, (ValueError, KeyError)):
                code = 400
            elif isinstance(exc, NoWorkers):
                code = 503
            self._json(code, {"error": type(exc).__name__,
                              "message": str(exc)})

        def _serve_ui(self, path):
            rel = path[len("/ui"):].lstrip("/") or "index.html"
            full = os.path.normpath(os.path.join(ui_dir, rel))
            if not full.startswith(os.path.abspath(ui_dir)) \
                    or not os.path.isfile(full):
                full = os.path.join(ui_dir, "index.html")
            if not os.path.isfile(full):
                return self._json(404, {"error": "NotFound"})
            ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
            with open(full, "rb") as f:
                self._send(200, f.read(), ctype)

        def do_GET(self):
            try:
                url = urlparse(self.path)
                qs = parse_qs(url.query)
                if ui_dir and (url.path == "/ui" or
                               url.path.startswith("/ui/")):
                    return self._serve_ui(url.path)
                if url.path == "/v1/workers":
                    return self._json(200, {
                        "workers": coordinator.pool.status()
                    })
                if url.path == "/v1/catalog":
                    return self._json(200, {
                        "tables": {
                            name: {
                                "columns": [list(c) for c in t.columns],
                                "bytes": t.total_bytes(),
                                "splits": len(t.splits),
                            }
                            for name, t in coordinator.catalog.tables.items()
                        }
                    })
                if url.path == "/v1/query":
                    return self._json(200, {
                        "queries": [
                            {"query": q.id, "state": q.state, "sql": q.sql,
                             "elapsed": round(q.elapsed(), 3)}
                            for q in coordinator.queries.values()
                        ]
                    })
                m = _QUERY_SUB.match(url.path)
                if m:
                    qid, sub = m.group(1), m.group(2)
                    if sub is None:
                        return self._json(200, coordinator.query_status(
                            qid, series="series" in qs
                        ))
                    if sub == "plan":
                        q = coordinator.query(qid)
                        doc = q.tree.to_json()
                        doc["schema"] = [list(c) for c in q.schema]
                        return self._json(200, doc)
                    if sub == "results":
                        timeout = float(qs.get("timeout", ["30"])[0])
                        rows = coordinator.results(qid, timeout=timeout)
                        if rows is None:
                            return self._json(202, {"state": "running"})
                        q = coordinator.query(qid)
                        if qs.get("format", ["json"])[0] == "csv":
                            out = io.StringIO()
                            w = csv.writer(out)
                            w.writerow([c for c, _ in q.schema])
                            w.writerows(rows)
                            return self._send(200, out.getvalue().encode(),
                                              "text/csv")
                        return self._json(200, {
                            "schema": [list(c) for c in q.schema],
                            "rows": [list(r) for r in rows],
                        })
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

        def do_POST(self):
            try:
                url = urlparse(self.path)
                if url.path == "/v1/query":
                    body = self._read_body()
                    if body.get("plan_only"):
                        return self._json(200, coordinator.plan(
                            body["sql"], body.get("options")
                        ))
                    q = coordinator.submit(body["sql"], body.get("options"))
                    return self._json(200, {"query": q.id})
                if url.path == "/v1/workers":
                    body = self._read_body()
                    coordinator.pool.register(
                        HttpWorker(body["url"], body.get("threads"))
                    )
                    return self._json(200, {"ok": True})
                m = _QUERY_SUB.match(url.path)
                if m:
                    qid, sub = m.group(1), m.group(2)
                    body = self._read_body()
                    if sub == "tune":
                        return self._json(
                            200, {"result": coordinator.tune(qid, body)}
                        )
                    if sub == "whatif":
                        return self._json(200, coordinator.whatif(
                            qid, body["stage"], body["target"]
                        ))
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

        def do_DELETE(self):
            try:
                m = _QUERY_SUB.match(urlparse(self.path).path)
                if m and m.group(2) is None:
                    coordinator.cancel(m.group(1))
                    return self._json(200, {"ok": True})
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

    return Handler


class CoordinatorServer:
    def __init__(self, coordinator, port=0, host="127.0.0.1", ui_dir=None):
        self.coordinator = coordinator
        self.httpd = ThreadingHTTPServer(
            (host, port), make_handler(coordinator, ui_dir)
        )
        self.port = self.httpd.server_address[1]
        self.url = f"http://{host}:{self.port}"
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.coordinator.shutdown()


def local_cluster(catalog, workers=2, threads=4, collect_period=1.0):
    """Single-process cluster for tests and demos: N task managers wired
    through an in-process transport plus one coordinator."""
    from ..worker.service import LocalTransport, TaskManager
    from .workers import LocalWorker

    transport = LocalTransport()
    pool = WorkerPool(heartbeat=False)
    managers = []
    for i in range(workers):
        url = f"local-{i}"
        m = TaskManager(threads=threads, transport=transport)
        transport.register(url, m)
        pool.register(LocalWorker(url, m))
        managers.append(m)
    coordinator = Coordinator(catalog, pool, collect_period=collect_period)
    return coordinator, managers


def main(argv=None):
    parser = argparse.ArgumentParser(description="query engine coordinator")
    parser.add_argument("--catalog", required=True,
                        help="catalog JSON file")
    parser.add_argument("--listen-port", type=int, default=8800)
    parser.add_argument("--ui-dir", default=None,
                        help="directory with the web console build")
    parser.add_argument("--autotune", action="store_true",
                        help="run the auto-tuner monitor loop")
    args = parser.parse_args(argv)

    coordinator = Coordinator(Catalog.load(args.catalog))
    server = CoordinatorServer(
        coordinator, port=args.listen_port, ui_dir=args.ui_dir
    ).start()
    print(f"coordinator listening on {server.url}")
    if args.autotune:
        from ..autotuner import Monitor
        Monitor(coordinator).start()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()


if __name__ == "__main__":
    main()
