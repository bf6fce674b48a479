"""Worker process: task manager, data/control HTTP plane, CLI.

The task manager owns the driver scheduler and every task hosted on the
node.  Transports abstract how exchange fetchers reach upstream workers:
LocalTransport wires task managers together in-process (single-process
clusters for tests), HttpTransport speaks the worker HTTP API.
"""

from __future__ import annotations

import argparse
import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import psutil
import requests

from ..catalog import SystemSplit
from ..errors import (
    InvalidSpec,
    PipelineFixed,
    TaskFinished,
    UnknownBufferId,
    UnknownQuery,
    WorkerOverloaded,
)
from ..pages import deserialize_frames, serialize_frames
from ..plan.pipelines import PipelineSpec
from ..runtime.scheduler import DriverScheduler
from .task import RemoteSplit, Task, TaskId

CPU_SAMPLE_PERIOD = 0.5


class TaskAborted(Exception):
    pass


class LocalTransport:
    """In-process page transport: worker URL -> TaskManager registry."""

    def __init__(self):
        self.registry = {}

    def register(self, url, manager):
        self.registry[url] = manager

    def get_results(self, url, task, buffer_id, token):
        return self.registry[url].get_results(task, buffer_id, token,
                                              max_wait=0.05)


class HttpTransport:
    def __init__(self, timeout=10.0):
        self.session = requests.Session()
        self.timeout = timeout

    def get_results(self, url, task, buffer_id, token):
        r = self.session.get(
            f"{url}/v1/task/{task}/results/{buffer_id}/{token}",
            timeout=self.timeout,
        )
        r.raise_for_status()
        pages = deserialize_frames(r.content)
        next_token = int(r.headers["X-Next-Token"])
        complete = r.headers.get("X-Complete") == "true"
        return pages, next_token, complete


class TaskManager:
    def __init__(self, threads=4, transport=None, max_tasks=256):
        self.scheduler = DriverScheduler(threads)
        self.threads = threads
        self.transport = transport if transport is not None else HttpTransport()
        self.tasks = {}
        self._lock = threading.RLock()
        self.max_tasks = max_tasks
        self.cpu_percent = 0.0
        self.process_cpu = 0.0
        self._stop = threading.Event()
        self._sampler = threading.Thread(target=self._sample_cpu, daemon=True)
        self._sampler.start()

    def _sample_cpu(self):
        proc = psutil.Process()
        psutil.cpu_percent(None)
        proc.cpu_percent(None)
        while not self._stop.wait(CPU_SAMPLE_PERIOD):
            self.cpu_percent = psutil.cpu_percent(None)
            self.process_cpu = proc.cpu_percent(None)

    # -- control plane -------------------------------------------------

    def create_task(self, spec):
        tid = TaskId.from_json(spec["task_id"])
        with self._lock:
            if str(tid) in self.tasks:
                raise InvalidSpec(f"duplicate task {tid}")
            active = sum(1 for t in self.tasks.values() if t.state == "running")
            if active >= self.max_tasks:
                raise WorkerOverloaded(f"{active} tasks running")
            pipelines = [PipelineSpec.from_json(p) for p in spec["pipelines"]]
            counts = {int(k): int(v)
                      for k, v in spec.get("driver_counts", {}).items()}
            splits = [SystemSplit(s["path"], s["start"], s["end"])
                      for s in spec.get("system_splits", ())]
            remote = {
                int(stage): {
                    "splits": [RemoteSplit.from_json(x)
                               for x in entry.get("splits", ())],
                    "no_more": entry.get("no_more", False),
                }
                for stage, entry in spec.get("remote_splits", {}).items()
            }
            task = Task(
                tid, pipelines, counts, spec.get("output", {}),
                self.scheduler, self.transport,
                system_splits=splits,
                splits_done=spec.get("splits_done", True),
                remote_splits=remote,
                scan_rows_per_sec=spec.get("scan_rows_per_sec"),
                exchange_rows_per_sec=spec.get("exchange_rows_per_sec"),
            )
            self.tasks[str(tid)] = task
        return tid

    def _task(self, task):
        try:
            return self.tasks[str(task)]
        except KeyError:
            raise UnknownQuery(f"no task {task}") from None

    def tune_task_dop(self, task, pipeline_id, target):
        return self._task(task).tune_dop(int(pipeline_id), int(target))

    def update_splits(self, task, source_stage, add=(), remove=(),
                      no_more=False):
        self._task(task).update_splits(int(source_stage), add, remove, no_more)

    def add_system_splits(self, task, splits, done=False):
        self._task(task).add_system_splits(splits, done)

    def output_buffers(self, task, body):
        t = self._task(task)
        buf = t.output_buffer
        op = body["op"]
        if op == "add":
            buf.add_buffer_id(body["buffer_id"], replay=body.get("replay", False))
        elif op == "remove":
            buf.remove_buffer_id(body["buffer_id"])
        elif op == "finish":
            buf.finish_buffer_id(body["buffer_id"])
        elif op == "reshuffle":
            buf.reshuffle(body["group"])
        elif op == "switch":
            buf.switch_group(body["group"])
        elif op == "retire":
            buf.retire_group(body["group"])
        elif op == "end":
            buf.end_signal()
        else:
            raise InvalidSpec(f"unknown buffer op {op!r}")

    def get_results(self, task, buffer_id, token, max_wait=0.1):
        t = self._task(task)
        deadline = time.monotonic() + max_wait
        while True:
            if t.state == "aborted":
                raise TaskAborted(str(task))
            pages, next_token, complete = t.output_buffer.get(
                int(buffer_id), int(token)
            )
            if pages or complete or time.monotonic() >= deadline:
                return pages, next_token, complete
            time.sleep(0.005)

    def destroy_task(self, task, mode="graceful"):
        t = self.tasks.get(str(task))
        if t is not None:
            t.destroy(mode)

    def forget_task(self, task, mode="graceful"):
        """Destroy a task and drop it from the registry.  Used by the
        coordinator once the task's output is fully drained (or the
        query is being torn down), so nothing lingers on the worker."""
        t = self.tasks.pop(str(task), None)
        if t is not None:
            t.destroy(mode)

    def task_info(self, task):
        return self._task(task).info()

    def info(self):
        with self._lock:
            states = {}
            for t in self.tasks.values():
                states[t.state] = states.get(t.state, 0) + 1
            return {
                "tasks": len(self.tasks),
                "task_states": states,
                "threads": self.threads,
                "cpu_percent": self.cpu_percent,
                "process_cpu": self.process_cpu,
                "cpu_count": psutil.cpu_count(),
            }

    def shutdown(self):
        self._stop.set()
        with self._lock:
            for t in self.tasks.values():
                t.destroy("abort")
        self.scheduler.shutdown()


# -- HTTP layer --------------------------------------------------------------

_RESULTS = re.compile(r"^/v1/task/([^/]+)/results/(\d+)/(\d+)$")
_TASK_SUB = re.compile(r"^/v1/task/([^/]+)(?:/(\w+))?$")


def make_handler(manager):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _json(self, code, obj):
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _read_body(self):
            n = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(n) or b"{}")

        def _fail(self, exc):
            code = 500
            if isinstance(exc, (UnknownQuery, UnknownBufferId)):
                code = 404
            elif isinstance(exc, TaskAborted):
                code = 410
            elif isinstance(exc, (InvalidSpec, ValueError, KeyError)):
                code = 400
            elif isinstance(exc, (PipelineFixed, TaskFinished)):
                code = 409
            elif isinstance(exc, WorkerOverloaded):
                code = 429
            self._json(code, {"error": type(exc).__name__, "message": str(exc)})

        def do_GET(self):
            try:
                url = urlparse(self.path)
                m = _RESULTS.match(url.path)
                if m:
                    task, bid, token = m.group(1), int(m.group(2)), int(m.group(3))
                    pages, next_token, complete = manager.get_results(
                        task, bid, token
                    )
                    body = serialize_frames(pages)
                    self.send_response(200)
                    self.send_header("Content-Type", "application/octet-stream")
                    self.send_header("Content-Length", str(len(body)))
                    self.send_header("X-Next-Token", str(next_token))
                    self.send_header("X-Complete",
                                     "true" if complete else "false")
                    self.end_headers()
                    self.wfile.write(body)
                    return
                m = _TASK_SUB.match(url.path)
                if m and m.group(2) == "info":
                    return self._json(200, manager.task_info(m.group(1)))
                if url.path == "/v1/info":
                    return self._json(200, manager.info())
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

        def do_POST(self):
            try:
                url = urlparse(self.path)
                if url.path == "/v1/task":
                    tid = manager.create_task(self._read_body())
                    return self._json(200, {"task": str(tid)})
                m = _TASK_SUB.match(url.path)
                if m:
                    task, sub = m.group(1), m.group(2)
                    body = self._read_body()
                    if sub == "dop":
                        applied = manager.tune_task_dop(
                            task, body["pipeline"], body["target"]
                        )
                        return self._json(200, {"applied": applied})
                    if sub == "splits":
                        if "system_splits" in body:
                            manager.add_system_splits(
                                task,
                                [SystemSplit(s["path"], s["start"], s["end"])
                                 for s in body["system_splits"]],
                                body.get("done", False),
                            )
                        else:
                            manager.update_splits(
                                task, body["source_stage"],
                                [RemoteSplit.from_json(x)
                                 for x in body.get("add", ())],
                                [RemoteSplit.from_json(x)
                                 for x in body.get("remove", ())],
                                body.get("no_more", False),
                            )
                        return self._json(200, {"ok": True})
                    if sub == "outputbuffers":
                        manager.output_buffers(task, body)
                        return self._json(200, {"ok": True})
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

        def do_DELETE(self):
            try:
                url = urlparse(self.path)
                m = _TASK_SUB.match(url.path)
                if m and m.group(2) is None:
                    qs = parse_qs(url.query)
                    mode = qs.get("mode", ["graceful"])[0]
                    if qs.get("forget", ["0"])[0] == "1":
                        manager.forget_task(m.group(1), mode)
                    else:
                        manager.destroy_task(m.group(1), mode)
                    return self._json(200, {"ok": True})
                self._json(404, {"error": "NotFound"})
            except Exception as exc:  # noqa: BLE001
                self._fail(exc)

    return Handler


class WorkerServer:
    def __init__(self, manager, port=0, host="127.0.0.1"):
        self.manager = manager
        self.httpd = ThreadingHTTPServer((host, port), make_handler(manager))
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
        self.manager.shutdown()


def main(argv=None):
    parser = argparse.ArgumentParser(description="query engine worker node")
    parser.add_argument("--coordinator-url", default=None)
    parser.add_argument("--listen-port", type=int, default=8801)
    parser.add_argument("--threads", type=int, default=4)
    parser.add_argument("--max-buffer-bytes", type=int, default=64 << 20)
    parser.add_argument("--data-dir", default=".")
    args = parser.parse_args(argv)

    manager = TaskManager(threads=args.threads)
    server = WorkerServer(manager, port=args.listen_port).start()
    print(f"worker listening on {server.url}")

    if args.coordinator_url:
        def register():
            while True:
                try:
                    requests.post(
                        f"{args.coordinator_url}/v1/workers",
                        json={"url": server.url, "threads": args.threads},
                        timeout=5,
                    )
                    return
                except Exception:
                    time.sleep(1)

        threading.Thread(target=register, daemon=True).start()

    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.stop()


if __name__ == "__main__":
    main()
