"""Worker handles and placement.

A WorkerHandle wraps one worker's control/data API.  LocalWorker calls a
TaskManager in the same process (single-process clusters for tests and
demos); HttpWorker speaks the worker HTTP API.  The pool places new tasks
on the least-loaded live worker, breaking ties in registration order.
"""

from __future__ import annotations

import threading
import time

import requests

from ..catalog import SystemSplit
from ..errors import (
    InvalidSpec,
    NoWorkers,
    PipelineFixed,
    TaskFinished,
    UnknownBufferId,
    UnknownQuery,
    WorkerOverloaded,
)

_ERROR_TYPES = {
    "UnknownQuery": UnknownQuery,
    "UnknownBufferId": UnknownBufferId,
    "InvalidSpec": InvalidSpec,
    "PipelineFixed": PipelineFixed,
    "TaskFinished": TaskFinished,
    "WorkerOverloaded": WorkerOverloaded,
}


class LocalWorker:
    def __init__(self, url, manager):
        self.url = url
        self.manager = manager
        self.threads = manager.threads

    def create_task(self, spec):
        return self.manager.create_task(spec)

    def tune_task_dop(self, task, pipeline_id, target):
        return self.manager.tune_task_dop(task, pipeline_id, target)

    def update_splits(self, task, source_stage, add=(), remove=(),
                      no_more=False):
        self.manager.update_splits(task, source_stage, add, remove, no_more)

    def add_system_splits(self, task, splits, done=False):
        self.manager.add_system_splits(task, splits, done)

    def output_buffers(self, task, body):
        self.manager.output_buffers(task, body)

    def get_results(self, task, buffer_id, token):
        return self.manager.get_results(task, buffer_id, token)

    def destroy_task(self, task, mode="graceful"):
        self.manager.destroy_task(task, mode)

    def forget_task(self, task, mode="graceful"):
        self.manager.forget_task(task, mode)

    def task_info(self, task):
        return self.manager.task_info(task)

    def info(self):
        return self.manager.info()


class HttpWorker:
    def __init__(self, url, threads=None, timeout=10.0):
        self.url = url.rstrip("/")
        self.threads = threads
        self.timeout = timeout
        self.session = requests.Session()

    def _check(self, r):
        if r.status_code >= 400:
            try:
                doc = r.json()
                exc = _ERROR_TYPES.get(doc.get("error"), RuntimeError)
                raise exc(doc.get("message", r.text))
            except ValueError:
                r.raise_for_status()
        return r

    def _post(self, path, body):
        return self._check(self.session.post(
            f"{self.url}{path}", json=body, timeout=self.timeout
        )).json()

    def create_task(self, spec):
        return self._post("/v1/task", spec)["task"]

    def tune_task_dop(self, task, pipeline_id, target):
        doc = self._post(f"/v1/task/{task}/dop",
                         {"pipeline": pipeline_id, "target": target})
        return doc["applied"]

    def update_splits(self, task, source_stage, add=(), remove=(),
                      no_more=False):
        self._post(f"/v1/task/{task}/splits", {
            "source_stage": source_stage,
            "add": [rs.to_json() for rs in add],
            "remove": [rs.to_json() for rs in remove],
            "no_more": no_more,
        })

    def add_system_splits(self, task, splits, done=False):
        self._post(f"/v1/task/{task}/splits", {
            "system_splits": [s.to_json() for s in splits],
            "done": done,
        })

    def output_buffers(self, task, body):
        self._post(f"/v1/task/{task}/outputbuffers", body)

    def get_results(self, task, buffer_id, token):
        from ..pages import deserialize_frames
        r = self._check(self.session.get(
            f"{self.url}/v1/task/{task}/results/{buffer_id}/{token}",
            timeout=self.timeout,
        ))
        pages = deserialize_frames(r.content)
        return (pages, int(r.headers["X-Next-Token"]),
                r.headers.get("X-Complete") == "true")

    def destroy_task(self, task, mode="graceful"):
        self._check(self.session.delete(
            f"{self.url}/v1/task/{task}?mode={mode}", timeout=self.timeout
        ))

    def forget_task(self, task, mode="graceful"):
        self._check(self.session.delete(
            f"{self.url}/v1/task/{task}?mode={mode}&forget=1",
            timeout=self.timeout,
        ))

    def task_info(self, task):
        return self._check(self.session.get(
            f"{self.url}/v1/task/{task}/info", timeout=self.timeout
        )).json()

    def info(self):
        return self._check(self.session.get(
            f"{self.url}/v1/info", timeout=self.timeout
        )).json()


HEARTBEAT_PERIOD = 2.0
HEARTBEAT_MISSES = 3


class WorkerPool:
    """Registered workers, liveness via heartbeat, least-loaded placement."""

    def __init__(self, heartbeat=False):
        self._lock = threading.RLock()
        self._workers = {}  # url -> handle (registration order preserved)
        self._assigned = {}  # url -> live task count
        self._misses = {}
        self._rr = 0
        self._stop = threading.Event()
        self._beat = None
        if heartbeat:
            self._beat = threading.Thread(target=self._heartbeat, daemon=True)
            self._beat.start()

    def register(self, handle):
        with self._lock:
            if handle.url not in self._workers:
                self._workers[handle.url] = handle
                self._assigned[handle.url] = 0
                self._misses[handle.url] = 0
            return self._workers[handle.url]

    def _heartbeat(self):
        while not self._stop.wait(HEARTBEAT_PERIOD):
            for url, handle in list(self._workers.items()):
                try:
                    handle.info()
                    self._misses[url] = 0
                except Exception:
                    self._misses[url] = self._misses.get(url, 0) + 1

    def alive(self):
        with self._lock:
            return [
                w for url, w in self._workers.items()
                if self._misses.get(url, 0) < HEARTBEAT_MISSES
            ]

    def pick(self):
        with self._lock:
            candidates = self.alive()
            if not candidates:
                raise NoWorkers("no live workers registered")
            low = min(self._assigned[w.url] for w in candidates)
            tied = [w for w in candidates if self._assigned[w.url] == low]
            choice = tied[self._rr % len(tied)]
            self._rr += 1
            self._assigned[choice.url] += 1
            return choice

    def release(self, url):
        with self._lock:
            if url in self._assigned and self._assigned[url] > 0:
                self._assigned[url] -= 1

    def workers(self):
        with self._lock:
            return list(self._workers.values())

    def status(self):
        with self._lock:
            out = []
            for url, w in self._workers.items():
                out.append({
                    "url": url,
                    "threads": w.threads,
                    "assigned_tasks": self._assigned[url],
                    "alive": self._misses.get(url, 0) < HEARTBEAT_MISSES,
                })
            return out

    def shutdown(self):
        self._stop.set()
