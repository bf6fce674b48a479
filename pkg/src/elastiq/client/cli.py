"""Command-line client.

Subcommands for manual use (submit/status/tune/whatif/monitor/results)
plus a script runner: a timed action script drives query initiation and
parallelism adjustments at specified offsets while a 1 Hz sampler
records per-stage throughput and DOP into a metrics log, exported as
CSV.  Script grammar (offsets in seconds from script start, one action
per line, `#` comments):

    at <T> SUBMIT <name> <sql-file> [key=value ...]
    at <T> AP S<k>,<a>,<b>     # raise stage k's DOP a -> b
    at <T> RP S<k>,<a>,<b>     # reduce stage k's DOP a -> b
    at <T> AC S<k>,<a>,<b>     # raise task DOP of all stage-k tasks
    at <T> RC S<k>,<a>,<b>     # reduce task DOP of all stage-k tasks
    at <T> WHATIF S<k>,<n>
    at <T> CONSTRAIN <seconds>
    at <T> MONITOR on|off

CSV schema: ts,query,stage,kind,rows_per_sec,bytes_per_sec,stage_dop,
task_dop,detail — kind "sample" rows carry metrics; marker rows carry
request/applied/rejected/failed/build-complete/finished events.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import threading
import time

import requests

SAMPLE_PERIOD = 1.0

_AT = re.compile(r"^at\s+([\d.]+)\s+(\S+)\s*(.*)$", re.IGNORECASE)
_STAGE_ARG = re.compile(r"^S(\d+),(\d+),(\d+)$", re.IGNORECASE)
_WHATIF_ARG = re.compile(r"^S(\d+),(\d+)$", re.IGNORECASE)

CSV_COLUMNS = ["ts", "query", "stage", "kind", "rows_per_sec",
               "bytes_per_sec", "stage_dop", "task_dop", "detail"]


class Client:
    def __init__(self, base_url, timeout=30.0):
        self.base = base_url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()

    def _check(self, r):
        if r.status_code >= 400:
            try:
                doc = r.json()
                raise RuntimeError(
                    f"{doc.get('error')}: {doc.get('message')}"
                )
            except ValueError:
                r.raise_for_status()
        return r.json()

    def submit(self, sql, options=None):
        return self._check(self.session.post(
            f"{self.base}/v1/query",
            json={"sql": sql, "options": options or {}},
            timeout=self.timeout,
        ))["query"]

    def status(self, qid, series=False):
        suffix = "?series=1" if series else ""
        return self._check(self.session.get(
            f"{self.base}/v1/query/{qid}{suffix}", timeout=self.timeout
        ))

    def plan(self, qid):
        return self._check(self.session.get(
            f"{self.base}/v1/query/{qid}/plan", timeout=self.timeout
        ))

    def tune(self, qid, command):
        return self._check(self.session.post(
            f"{self.base}/v1/query/{qid}/tune", json=command,
            timeout=max(self.timeout, 120),
        ))

    def whatif(self, qid, stage, dop):
        return self._check(self.session.post(
            f"{self.base}/v1/query/{qid}/whatif",
            json={"stage": stage, "target": dop}, timeout=self.timeout,
        ))

    def results(self, qid, timeout=300.0):
        return self._check(self.session.get(
            f"{self.base}/v1/query/{qid}/results?timeout={timeout}",
            timeout=timeout + 30,
        ))

    def cancel(self, qid):
        return self._check(self.session.delete(
            f"{self.base}/v1/query/{qid}", timeout=self.timeout
        ))


# -- scripts -----------------------------------------------------------------


class Script:
    """Parsed timed action list; offsets must be non-decreasing."""

    def __init__(self, actions):
        self.actions = actions

    @staticmethod
    def parse(text):
        actions = []
        last_t = 0.0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = _AT.match(line)
            if not m:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}")
            t = float(m.group(1))
            if t < last_t:
                raise ValueError(
                    f"line {lineno}: offsets must be non-decreasing"
                )
            last_t = t
            verb = m.group(2).upper()
            rest = m.group(3).strip()
            if verb == "SUBMIT":
                parts = rest.split()
                if len(parts) < 2:
                    raise ValueError(f"line {lineno}: SUBMIT needs "
                                     "<name> <sql-file>")
                options = {}
                for kv in parts[2:]:
                    key, _, value = kv.partition("=")
                    options[key] = json.loads(value) if value and (
                        value[0] in "[{" or
                        value.replace(".", "").replace("-", "").isdigit()
                    ) else value
                actions.append({"t": t, "verb": "SUBMIT",
                                "name": parts[0], "sql_file": parts[1],
                                "options": options})
            elif verb in ("AP", "RP", "AC", "RC"):
                m2 = _STAGE_ARG.match(rest)
                if not m2:
                    raise ValueError(
                        f"line {lineno}: {verb} needs S<k>,<a>,<b>"
                    )
                actions.append({
                    "t": t, "verb": verb, "stage": int(m2.group(1)),
                    "from": int(m2.group(2)), "to": int(m2.group(3)),
                })
            elif verb == "WHATIF":
                m2 = _WHATIF_ARG.match(rest)
                if not m2:
                    raise ValueError(f"line {lineno}: WHATIF needs S<k>,<n>")
                actions.append({"t": t, "verb": verb,
                                "stage": int(m2.group(1)),
                                "dop": int(m2.group(2))})
            elif verb == "CONSTRAIN":
                actions.append({"t": t, "verb": verb,
                                "seconds": float(rest)})
            elif verb == "MONITOR":
                flag = rest.lower()
                if flag not in ("on", "off"):
                    raise ValueError(f"line {lineno}: MONITOR on|off")
                actions.append({"t": t, "verb": verb,
                                "enable": flag == "on"})
            else:
                raise ValueError(f"line {lineno}: unknown verb {verb}")
        return Script(actions)

    @staticmethod
    def load(path):
        with open(path) as f:
            return Script.parse(f.read())


class MetricsLog:
    """Per-second samples plus event markers, exported as CSV."""

    def __init__(self):
        self.rows = []
        self._lock = threading.Lock()

    def sample(self, ts, query, stage, rows_per_sec, bytes_per_sec,
               stage_dop, task_dop):
        with self._lock:
            self.rows.append([
                round(ts, 3), query, stage, "sample",
                round(rows_per_sec, 3),
                round(bytes_per_sec, 3) if bytes_per_sec is not None else "",
                stage_dop, task_dop, "",
            ])

    def marker(self, ts, query, kind, stage="", detail=""):
        with self._lock:
            self.rows.append([
                round(ts, 3), query, stage, kind, "", "", "", "", detail,
            ])

    def export(self, path):
        with self._lock:
            rows = [list(r) for r in self.rows]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            writer.writerows(rows)

    def markers(self, kind=None):
        with self._lock:
            return [r for r in self.rows
                    if r[3] != "sample" and (kind is None or r[3] == kind)]


class _Sampler(threading.Thread):
    """Polls query status every second and logs per-stage samples plus
    markers for coordinator-side events (tuning applied, hash-table
    builds, completion)."""

    def __init__(self, client, log, t0, period=SAMPLE_PERIOD):
        super().__init__(daemon=True, name="metrics-sampler")
        self.client = client
        self.log = log
        self.t0 = t0
        self.period = period
        self.queries = {}  # qid -> seen event count
        self._lock = threading.Lock()
        self._stop = threading.Event()

    def track(self, qid):
        with self._lock:
            self.queries.setdefault(qid, 0)

    def stop(self):
        self._stop.set()

    def run(self):
        while not self._stop.wait(self.period):
            self.poll_once()

    def poll_once(self):
        with self._lock:
            tracked = dict(self.queries)
        for qid, seen in tracked.items():
            try:
                status = self.client.status(qid)
            except Exception:  # noqa: BLE001
                continue
            now = time.monotonic() - self.t0
            for sid, st in status["stages"].items():
                scan = st.get("scan")
                self.log.sample(
                    now, qid, int(sid), st["throughput"],
                    st.get("r_consume") if scan else None,
                    st["dop"], st["task_dop"],
                )
            events = status.get("events", [])
            for event in events[seen:]:
                kind = event["kind"]
                if kind == "dop_switch":
                    self.log.marker(
                        now, qid, "applied", event.get("stage", ""),
                        json.dumps({k: event[k] for k in
                                    ("from_dop", "to_dop")}),
                    )
                    self.log.marker(
                        now, qid, "build-complete", event.get("stage", ""),
                        json.dumps({
                            "build_seconds": event["build_seconds"],
                            "switch_seconds": event["switch_seconds"],
                        }),
                    )
                elif kind in ("add_task", "remove_task", "task_dop",
                              "auto_tune", "constraint"):
                    self.log.marker(now, qid, "applied",
                                    event.get("stage", ""), kind)
                elif kind in ("finished", "failed", "canceled"):
                    self.log.marker(now, qid, kind, "",
                                    json.dumps({
                                        k: v for k, v in event.items()
                                        if k not in ("ts", "kind")
                                    }))
            with self._lock:
                self.queries[qid] = len(events)


def run_script(script, coordinator_url, out=None, speed=1.0,
               wait_timeout=600.0):
    """Dispatch the script's actions at their offsets (scaled by 1/speed
    for faster test runs), wait for the submitted queries, and export
    the metrics log.  Returns (exit status, MetricsLog)."""
    client = Client(coordinator_url)
    log = MetricsLog()
    t0 = time.monotonic()
    sampler = _Sampler(client, log, t0, period=SAMPLE_PERIOD / speed)
    sampler.start()
    names = {}
    current = None
    failed = False

    def offset():
        return time.monotonic() - t0

    for action in script.actions:
        delay = action["t"] / speed - offset()
        if delay > 0:
            time.sleep(delay)
        verb = action["verb"]
        try:
            if verb == "SUBMIT":
                with open(action["sql_file"]) as f:
                    sql = f.read()
                qid = client.submit(sql, action["options"])
                names[action["name"]] = qid
                current = qid
                sampler.track(qid)
                log.marker(offset(), qid, "request", "",
                           f"SUBMIT {action['name']}")
                continue
            if current is None:
                raise RuntimeError("no query submitted yet")
            if verb in ("AP", "RP"):
                log.marker(offset(), current, "request", action["stage"],
                           f"{verb} S{action['stage']},"
                           f"{action['from']},{action['to']}")
                client.tune(current, {"op": "stage_dop",
                                      "stage": action["stage"],
                                      "target": action["to"]})
                log.marker(offset(), current, "applied", action["stage"],
                           f"{verb} -> {action['to']}")
            elif verb in ("AC", "RC"):
                log.marker(offset(), current, "request", action["stage"],
                           f"{verb} S{action['stage']},"
                           f"{action['from']},{action['to']}")
                client.tune(current, {"op": "task_dop",
                                      "stage": action["stage"],
                                      "target": action["to"]})
                log.marker(offset(), current, "applied", action["stage"],
                           f"{verb} -> {action['to']}")
            elif verb == "WHATIF":
                doc = client.whatif(current, action["stage"],
                                    action["dop"])
                log.marker(offset(), current, "whatif", action["stage"],
                           json.dumps({"t_predicted": doc["t_predicted"]}))
            elif verb == "CONSTRAIN":
                client.tune(current, {"op": "constraint",
                                      "seconds": action["seconds"]})
                log.marker(offset(), current, "applied", "",
                           f"CONSTRAIN {action['seconds']}")
            elif verb == "MONITOR":
                client.tune(current, {"op": "monitor",
                                      "enable": action["enable"]})
                log.marker(offset(), current, "applied", "",
                           f"MONITOR {'on' if action['enable'] else 'off'}")
        except requests.ConnectionError as exc:
            log.marker(offset(), current or "", "failed", "", str(exc))
            failed = True
            break  # coordinator unreachable: abort the script
        except Exception as exc:  # noqa: BLE001
            # e.g. action on an unknown stage: log and continue
            log.marker(offset(), current or "",
                       "rejected" if "Rejected" in str(exc) else "failed",
                       action.get("stage", ""), str(exc))

    deadline = time.monotonic() + wait_timeout
    states = {}
    for qid in names.values():
        state = "running"
        while time.monotonic() < deadline:
            try:
                state = client.status(qid)["state"]
            except Exception:  # noqa: BLE001
                state = "unreachable"
                break
            if state != "running":
                break
            time.sleep(0.2)
        states[qid] = state
    sampler.poll_once()  # final samples and completion markers
    sampler.stop()
    if out:
        log.export(out)
    ok = not failed and all(s == "finished" for s in states.values())
    return (0 if ok else 1), log


# -- CLI ---------------------------------------------------------------------


def _print(obj):
    print(json.dumps(obj, indent=2, default=str))


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="elastiq", description="query engine command-line client"
    )
    parser.add_argument("--coordinator", default="http://127.0.0.1:8800")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="submit a query")
    p.add_argument("sql", help="SQL text or @file")
    p.add_argument("--options", default="{}",
                   help="JSON submit options")
    p.add_argument("--wait", action="store_true")

    p = sub.add_parser("status", help="query status")
    p.add_argument("query")
    p.add_argument("--series", action="store_true")

    p = sub.add_parser("plan", help="query plan")
    p.add_argument("query")

    p = sub.add_parser("tune", help="apply a tuning command")
    p.add_argument("query")
    p.add_argument("spec", help="JSON tuning command")

    p = sub.add_parser("whatif", help="predict a DOP change")
    p.add_argument("query")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--dop", type=int, required=True)

    p = sub.add_parser("monitor", help="toggle the auto-tuner monitor")
    p.add_argument("query")
    p.add_argument("state", choices=["on", "off"])
    p.add_argument("--constraint", type=float, default=None)

    p = sub.add_parser("results", help="fetch results")
    p.add_argument("query")
    p.add_argument("--csv", default=None, help="write CSV to this path")
    p.add_argument("--timeout", type=float, default=300.0)

    p = sub.add_parser("cancel", help="cancel a query")
    p.add_argument("query")

    p = sub.add_parser("script", help="run a timed tuning script")
    p.add_argument("path")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.add_argument("--speed", type=float, default=1.0,
                   help="time scale divisor (2 = run twice as fast)")

    args = parser.parse_args(argv)
    client = Client(args.coordinator)

    if args.command == "submit":
        sql = args.sql
        if sql.startswith("@"):
            with open(sql[1:]) as f:
                sql = f.read()
        qid = client.submit(sql, json.loads(args.options))
        print(qid)
        if args.wait:
            _print(client.results(qid))
        return 0
    if args.command == "status":
        _print(client.status(args.query, series=args.series))
        return 0
    if args.command == "plan":
        _print(client.plan(args.query))
        return 0
    if args.command == "tune":
        _print(client.tune(args.query, json.loads(args.spec)))
        return 0
    if args.command == "whatif":
        _print(client.whatif(args.query, args.stage, args.dop))
        return 0
    if args.command == "monitor":
        command = {"op": "monitor", "enable": args.state == "on"}
        if args.constraint is not None:
            command["constraint"] = args.constraint
        _print(client.tune(args.query, command))
        return 0
    if args.command == "results":
        doc = client.results(args.query, timeout=args.timeout)
        if args.csv:
            with open(args.csv, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow([c for c, _ in doc["schema"]])
                writer.writerows(doc["rows"])
            print(f"wrote {args.csv}")
        else:
            _print(doc)
        return 0
    if args.command == "cancel":
        _print(client.cancel(args.query))
        return 0
    if args.command == "script":
        status, _ = run_script(Script.load(args.path), args.coordinator,
                               out=args.out, speed=args.speed)
        return status
    return 2


if __name__ == "__main__":
    sys.exit(main())
