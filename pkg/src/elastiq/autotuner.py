"""What-if predictor, bottleneck localization, request filter, auto-tuner.

The predictor answers "how long would this query still run if stage S
moved to DOP n2?" from three observed quantities: the governing scan's
remaining volume V_remain, its consumption rate R_consume (so
T_remain = V_remain / R_consume), and the stage's hash-table build time
T_build (the tuning overhead for stateful stages).  The speedup factor
is capped by CPU headroom on the workers running the upstream stage.

The auto-tuner consumes immutable collector samples and applies accepted
actions through the coordinator's tuning commands in three modes: direct
(one stage, one DOP), one-time (plan once for a latency constraint), and
monitor (re-plan every period, stepping DOPs by one inside a slack band).

Downscale predictions use inverse-linear scaling — the symmetric
counterpart of the upscale formula; a heuristic, stated as such.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass

from .errors import (
    FilterRejected,
    Infeasible,
    NoProgressSignal,
    StaleData,
)
from .plan.fragments import ExchangeSource, walk_fragment

BOTTLENECK_PERIODS = 3  # K: collection periods with no turn-up
NIC_THRESHOLD = 0.9
MONITOR_PERIOD = 5.0
MONITOR_SLACK = 0.10
MAX_CANDIDATE_DOP = 16
UNCAPPED = 64.0  # cap when upstream CPU usage is too small to measure


@dataclass
class PredictionInputs:
    v_remain: float  # bytes left to scan
    r_consume: float  # bytes/second
    n1: int
    n2: int
    t_tuning: float = 0.0  # 0 for stateless stages, T_build for joins
    t_build: float = 0.0

    @property
    def t_remain(self):
        return self.v_remain / self.r_consume


@dataclass
class PredictionResult:
    t_remain: float
    n_f: float
    n_f_max: float
    t_predicted: float

    def to_json(self):
        return {
            "t_remain": self.t_remain,
            "n_f": self.n_f,
            "n_f_max": self.n_f_max,
            "t_predicted": self.t_predicted,
        }


def speedup_cap(current_cores, available_cores):
    """n_f_max = (available + current) / current, clamped to >= 1."""
    if current_cores <= 1e-9:
        return UNCAPPED
    return max(1.0, (available_cores + current_cores) / current_cores)


def predict(inputs, n_f_max=UNCAPPED):
    """T_predicted = (T_remain - T_tuning) / n_f + T_tuning for upscale,
    inverse-linear for downscale; identity when n2 == n1."""
    t_remain = inputs.t_remain
    work = max(0.0, t_remain - inputs.t_tuning)
    if inputs.n2 >= inputs.n1:
        n_f = min(inputs.n2 / inputs.n1, n_f_max)
        t_predicted = work / n_f + inputs.t_tuning
        if inputs.n2 == inputs.n1:
            t_predicted = t_remain  # exact identity, no tuning overhead
    else:
        n_f = inputs.n2 / inputs.n1
        t_predicted = work * (inputs.n1 / inputs.n2) + inputs.t_tuning
    return PredictionResult(t_remain, n_f, n_f_max, t_predicted)


# -- reading a query's runtime state ----------------------------------------


def governing_scan(execution, sid):
    """The table-scan stage whose progress governs `sid`: descend along
    the probe (non-build) side until a scan stage is reached."""
    st = execution.stages[sid]
    if st.frag.is_scan_stage():
        return sid
    probe = [
        n.stage_id for n in walk_fragment(st.frag.plan)
        if isinstance(n, ExchangeSource) and not n.for_build
    ]
    for cid in probe or st.frag.inputs:
        found = governing_scan(execution, cid)
        if found is not None:
            return found
    return None


def _latest(st):
    return st.samples[-1] if st.samples else None


def estimate_remaining(execution, sid):
    """T_remain = V_remain / R_consume of the governing scan stage;
    0 once the scan is done and the stage has drained."""
    if execution.state != "running":
        return 0.0
    scan_sid = governing_scan(execution, sid)
    if scan_sid is None:
        raise NoProgressSignal(f"stage {sid} has no governing scan stage")
    scan = execution.stages[scan_sid]
    sample = _latest(scan)
    if sample is None or sample["scan"] is None:
        raise NoProgressSignal(f"no samples for scan stage {scan_sid}")
    v_remain = sample["scan"]["bytes_pending"]
    if v_remain <= 0:
        states = set(sample["states"].values())
        if states <= {"finished"}:
            return 0.0
        return 0.0  # scan drained; downstream work is what remains
    r_consume = sample["r_consume"]
    if not r_consume or r_consume <= 0:
        raise NoProgressSignal(
            f"scan stage {scan_sid} has no consumption-rate window yet"
        )
    return v_remain / r_consume


def locate_bottleneck(execution, k=BOTTLENECK_PERIODS,
                      nic_utilization=None, nic_threshold=NIC_THRESHOLD):
    """Stages whose receive buffers were never observed empty over the
    last k collection periods (turn-up counter delta zero while rows kept
    arriving) are compute bottlenecks.  `nic_utilization` may map stage
    id -> fraction; above the threshold flags a network bottleneck."""
    if all(len(st.samples) < 2 for st in execution.stages.values()):
        raise StaleData(f"no runtime samples for query {execution.id}")
    out = []
    for sid, st in sorted(execution.stages.items()):
        if nic_utilization and \
                nic_utilization.get(sid, 0.0) >= nic_threshold:
            out.append((sid, "network"))
            continue
        if len(st.samples) < k + 1:
            continue
        window = list(st.samples)[-(k + 1):]
        if not any("running" in s["states"].values() for s in window):
            continue
        first, last = window[0], window[-1]
        def total(sample):
            return sum(
                c for per_task in sample["turn_up"].values()
                for c in per_task.values()
            )
        busy = last["rows_total"] > first["rows_total"]
        if busy and last["turn_up"] and total(last) == total(first):
            out.append((sid, "compute"))
    return out


def cpu_cap(execution, sid):
    """Speedup cap from CPU headroom on the workers running the stage's
    upstream (governing scan) tasks."""
    scan_sid = governing_scan(execution, sid)
    if scan_sid is None:
        return UNCAPPED
    infos = {}
    for t in execution.stages[scan_sid].tasks:
        if t.worker.url not in infos:
            try:
                infos[t.worker.url] = t.worker.info()
            except Exception:  # noqa: BLE001
                pass
    if not infos:
        return UNCAPPED
    current = sum(i["process_cpu"] for i in infos.values()) / 100.0
    available = sum(
        max(0.0, i["cpu_count"] * (1.0 - i["cpu_percent"] / 100.0))
        for i in infos.values()
    )
    return speedup_cap(current, available)


def _stage_t_build(execution, sid):
    sample = _latest(execution.stages[sid])
    if sample and sample["t_build"] is not None:
        return sample["t_build"]
    return 0.0


def predict_with_dop(execution, sid, n2):
    """What-if: predicted remaining time of the query if stage `sid`
    moved to DOP `n2`, plus the DOP-time list over the candidate range."""
    st = execution.stages[sid]
    t_remain = estimate_remaining(execution, sid)
    is_join = st.frag.has_join()
    t_build = _stage_t_build(execution, sid) if is_join else 0.0
    n1 = max(1, len(st.tasks))
    cap = cpu_cap(execution, sid)
    inputs = PredictionInputs(
        v_remain=t_remain, r_consume=1.0,  # already in seconds
        n1=n1, n2=int(n2), t_tuning=t_build, t_build=t_build,
    )
    result = predict(inputs, cap)
    hi = min(MAX_CANDIDATE_DOP,
             max(int(n2), math.ceil(n1 * min(cap, MAX_CANDIDATE_DOP))))
    dop_time = {
        dop: predict(
            PredictionInputs(t_remain, 1.0, n1, dop, t_build, t_build),
            cap,
        ).t_predicted
        for dop in range(1, hi + 1)
    }
    return {
        "stage": sid,
        "n1": n1,
        "n2": int(n2),
        "t_build": t_build,
        **result.to_json(),
        "dop_time_list": dop_time,
    }


# -- request filter ----------------------------------------------------------


def check_filter(execution, sid, target):
    """Raises FilterRejected when the request is wasteful: finished
    query/stage, a join whose remaining run is shorter than rebuilding
    its hash tables, or a no-op DOP."""
    if execution.state != "running":
        raise FilterRejected(f"query {execution.id} is {execution.state}")
    st = execution.stages[sid]
    sample = _latest(st)
    if sample and set(sample["states"].values()) <= {"finished"}:
        raise FilterRejected(f"stage {sid} already finished")
    if int(target) == len(st.tasks):
        raise FilterRejected(f"stage {sid} already runs {target} tasks")
    if st.frag.has_join():
        try:
            t_remain = estimate_remaining(execution, sid)
        except NoProgressSignal:
            return  # no evidence yet; let the request through
        t_build = _stage_t_build(execution, sid)
        if t_build > 0 and t_remain < t_build:
            raise FilterRejected(
                f"stage {sid} finishes in {t_remain:.2f}s, less than its "
                f"{t_build:.2f}s hash table build time"
            )


def direct_tune(coordinator, qid, sid, target):
    """Filter-checked stage DOP change."""
    execution = coordinator.query(qid)
    check_filter(execution, int(sid), int(target))
    return coordinator.tune(qid, {"op": "stage_dop", "stage": int(sid),
                                  "target": int(target)})


# -- tuning units and constraint planning ------------------------------------


def build_units(execution):
    """One tuning unit per table-scan stage: the scan is the progress
    indicator; the knobs are the elastic intermediate stages it governs.
    Units are wired into a DAG: a unit precedes another when its subtree
    feeds the other's join build side."""
    units = {}
    for sid, st in execution.stages.items():
        if st.frag.is_scan_stage():
            units[sid] = {"scan": sid, "knobs": [], "prereqs": set()}
    for sid, st in execution.stages.items():
        if st.frag.is_scan_stage() or \
                st.frag.elasticity_class == "fixed-one":
            continue
        scan = governing_scan(execution, sid)
        if scan in units:
            units[scan]["knobs"].append(sid)
    for sid, st in execution.stages.items():
        scan = governing_scan(execution, sid)
        for node in walk_fragment(st.frag.plan):
            if isinstance(node, ExchangeSource) and node.for_build:
                feeder = governing_scan(execution, node.stage_id)
                if feeder in units and scan in units and feeder != scan:
                    units[scan]["prereqs"].add(feeder)
    return [units[s] for s in sorted(units)]


def _unit_deadline(execution, unit, units, constraint, remains):
    """A unit inside a dependency chain gets a share of the constraint
    proportional to its remaining time; independent units get it all."""
    related = {unit["scan"]} | set(unit["prereqs"])
    for other in units:
        if unit["scan"] in other["prereqs"]:
            related.add(other["scan"])
    if len(related) == 1:
        return constraint
    total = sum(remains.get(s, 0.0) for s in related)
    if total <= 0:
        return constraint
    return constraint * remains.get(unit["scan"], 0.0) / total


def _unit_actions(execution, unit, deadline, slack=0.0):
    """Smallest DOP per knob whose prediction meets the deadline; falls
    back to the scan stage's task DOP when the unit has no knob stage.
    Returns (actions, infeasible)."""
    scan_sid = unit["scan"]
    try:
        t_remain = estimate_remaining(execution, scan_sid)
    except NoProgressSignal:
        return [], False
    if t_remain <= 0:
        return [], False
    budget = deadline * (1.0 + slack)
    actions = []
    infeasible = False
    targets = unit["knobs"] or [("task_dop", scan_sid)]
    for knob in targets:
        if isinstance(knob, tuple):
            kind, sid = knob
            n1 = execution.stages[sid].task_dop
        else:
            kind, sid = "stage_dop", knob
            n1 = max(1, len(execution.stages[sid].tasks))
        is_join = execution.stages[sid].frag.has_join() \
            if kind == "stage_dop" else False
        t_build = _stage_t_build(execution, sid) if is_join else 0.0
        cap = cpu_cap(execution, sid)
        hi = min(MAX_CANDIDATE_DOP, max(n1, math.ceil(n1 * cap)))
        chosen = None
        for dop in range(1, hi + 1):
            t = predict(
                PredictionInputs(t_remain, 1.0, n1, dop, t_build, t_build),
                cap,
            ).t_predicted
            if t <= budget:
                chosen = dop
                break
        if chosen is None:
            chosen = hi
            infeasible = True
        if chosen != n1:
            actions.append({"op": kind, "stage": sid, "target": chosen})
    return actions, infeasible


def plan_one_time(coordinator, qid, constraint):
    """Plan DOPs once so the query meets the latency constraint with the
    least parallelism, and apply the accepted actions.  Raises Infeasible
    (after applying the maximum) when even the cap misses it."""
    if constraint <= 0:
        raise ValueError("latency constraint must be positive")
    execution = coordinator.query(qid)
    units = build_units(execution)
    remains = {}
    for u in units:
        try:
            remains[u["scan"]] = estimate_remaining(execution, u["scan"])
        except NoProgressSignal:
            remains[u["scan"]] = 0.0
    applied = []
    any_infeasible = False
    for unit in sorted(units, key=lambda u: -remains.get(u["scan"], 0.0)):
        deadline = _unit_deadline(execution, unit, units, constraint,
                                  remains)
        actions, infeasible = _unit_actions(execution, unit, deadline)
        any_infeasible = any_infeasible or infeasible
        for action in actions:
            try:
                if action["op"] == "stage_dop":
                    check_filter(execution, action["stage"],
                                 action["target"])
                coordinator.tune(qid, dict(action))
                applied.append(action)
                execution.event("auto_tune", mode="one-time", **action)
            except FilterRejected:
                continue
    if any_infeasible:
        raise Infeasible(
            f"constraint {constraint}s not reachable; applied maximum "
            f"parallelism {applied}"
        )
    return applied


class Monitor(threading.Thread):
    """Per-coordinator monitor loop: every period, for each running query
    with a latency constraint and monitoring enabled, nudge unit DOPs by
    one step when predictions fall outside the slack band around the
    unit's deadline share."""

    def __init__(self, coordinator, period=MONITOR_PERIOD,
                 slack=MONITOR_SLACK):
        super().__init__(daemon=True, name="autotune-monitor")
        self.coordinator = coordinator
        self.period = period
        self.slack = slack
        self._stop = threading.Event()

    def stop(self):
        self._stop.set()

    def run(self):
        while not self._stop.wait(self.period):
            for execution in self.coordinator.running_queries():
                if not getattr(execution, "monitor_enabled", False):
                    continue
                try:
                    self.step(execution)
                except Exception:  # noqa: BLE001
                    pass  # next period sees fresh samples

    def step(self, execution):
        constraint = execution.latency_constraint
        if not constraint:
            return
        budget = constraint - execution.elapsed()
        if budget <= 0:
            budget = 0.1  # overdue: push as hard as the filter allows
        units = build_units(execution)
        remains = {}
        for u in units:
            try:
                remains[u["scan"]] = estimate_remaining(
                    execution, u["scan"]
                )
            except NoProgressSignal:
                remains[u["scan"]] = 0.0
        for unit in units:
            if remains.get(unit["scan"], 0.0) <= 0:
                continue
            deadline = _unit_deadline(execution, unit, units, budget,
                                      remains)
            self._step_unit(execution, unit, deadline,
                            remains[unit["scan"]])

    def _step_unit(self, execution, unit, deadline, t_remain):
        targets = unit["knobs"] or [("task_dop", unit["scan"])]
        for knob in targets:
            if isinstance(knob, tuple):
                kind, sid = knob
                n1 = execution.stages[sid].task_dop
            else:
                kind, sid = "stage_dop", knob
                n1 = max(1, len(execution.stages[sid].tasks))
            is_join = execution.stages[sid].frag.has_join() \
                if kind == "stage_dop" else False
            t_build = _stage_t_build(execution, sid) if is_join else 0.0
            cap = cpu_cap(execution, sid)

            def predicted(dop):
                return predict(
                    PredictionInputs(t_remain, 1.0, n1, dop,
                                     t_build, t_build), cap
                ).t_predicted

            target = None
            if predicted(n1) > deadline * (1 + self.slack):
                target = n1 + 1
            elif n1 > 1 and predicted(n1 - 1) <= deadline * (1 + self.slack):
                target = n1 - 1
            if target is None:
                continue
            try:
                if kind == "stage_dop":
                    check_filter(execution, sid, target)
                self.coordinator.tune(execution.id, {
                    "op": kind, "stage": sid, "target": target,
                })
                execution.event("auto_tune", mode="monitor", op=kind,
                                stage=sid, target=target)
            except Exception:  # noqa: BLE001
                continue  # rejected or raced with completion


def enable_monitor(execution, constraint=None):
    if constraint is not None:
        execution.latency_constraint = float(constraint)
    execution.monitor_enabled = True


def disable_monitor(execution):
    execution.monitor_enabled = False
