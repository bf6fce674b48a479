"""Auto-tuner: predictor arithmetic, bottleneck rule, filter, planning."""

import random
import threading
import time
from types import SimpleNamespace

import pytest

from elastiq.autotuner import (
    Monitor,
    PredictionInputs,
    build_units,
    check_filter,
    estimate_remaining,
    governing_scan,
    locate_bottleneck,
    plan_one_time,
    predict,
    predict_with_dop,
    speedup_cap,
)
from elastiq.buffers import ExchangeReceiveBuffer
from elastiq.catalog import Catalog
from elastiq.coordinator import local_cluster
from elastiq.datagen import generate
from elastiq.errors import FilterRejected, NoProgressSignal, StaleData
from elastiq.pages import INT64, Page

JOIN_SQL = (
    "SELECT l_orderkey, sum(l_extendedprice * (1 - l_discount)) "
    "FROM lineitem INNER JOIN orders ON l_orderkey = o_orderkey "
    "GROUP BY l_orderkey"
)
SCAN_SQL = "SELECT o_custkey, sum(o_totalprice) FROM orders GROUP BY o_custkey"


class TestPredictor:
    def test_reference_upscale_case(self):
        """(49.68 - 2.4) / 4 + 2.4 = 14.22 for n1=2 -> n2=8 capped at 4."""
        inputs = PredictionInputs(
            v_remain=49.68, r_consume=1.0, n1=2, n2=8,
            t_tuning=2.4, t_build=2.4,
        )
        result = predict(inputs, n_f_max=4.0)
        assert result.n_f == 4.0
        assert abs(result.t_predicted - 14.22) < 1e-9

    def test_identity_is_exact(self):
        rng = random.Random(5)
        for _ in range(1000):
            n1 = rng.randrange(1, 12)
            inputs = PredictionInputs(
                v_remain=rng.uniform(0.01, 1e5),
                r_consume=rng.uniform(0.01, 1e4),
                n1=n1, n2=n1,
                t_tuning=rng.uniform(0, 30), t_build=rng.uniform(0, 30),
            )
            result = predict(inputs, n_f_max=rng.uniform(1, 20))
            assert result.t_predicted == inputs.t_remain

    def test_monotone_up_to_cap_constant_beyond(self):
        cap = 3.0
        times = [
            predict(PredictionInputs(100.0, 1.0, 2, n2, 5.0, 5.0), cap)
            .t_predicted
            for n2 in range(1, 13)
        ]
        for a, b in zip(times, times[1:]):
            assert b <= a + 1e-12
        # beyond n2 = n1 * cap = 6 the cap holds the prediction constant
        assert times[6] == times[8] == times[11]

    def test_downscale_inverse_linear(self):
        result = predict(PredictionInputs(20.0, 1.0, 4, 2, 3.0, 3.0))
        assert abs(result.t_predicted - ((20.0 - 3.0) * 2 + 3.0)) < 1e-12

    def test_cpu_cap_reference_case(self):
        # upstream at 25% of a core with 4 cores free -> (4 + .25)/.25 = 17
        assert speedup_cap(0.25, 4.0) == 17.0
        inputs = PredictionInputs(100.0, 1.0, 1, 1000)
        assert predict(inputs, speedup_cap(0.25, 4.0)).n_f == 17.0

    def test_tuning_overhead_floors_prediction(self):
        result = predict(PredictionInputs(10.0, 1.0, 1, 8, 4.0, 4.0), 100.0)
        assert result.t_predicted >= 4.0


def _fake_stage(samples):
    return SimpleNamespace(samples=samples)


def _sample(rows_total, turn_up, states=("running",)):
    return {
        "ts": 0.0, "rows_total": rows_total,
        "turn_up": {9: {"t0": turn_up}},
        "states": {"t0": s for s in states},
    }


class TestBottleneck:
    def test_rule_application(self):
        execution = SimpleNamespace(id="q", stages={
            1: _fake_stage([_sample(100 * i, 5) for i in range(5)]),
            3: _fake_stage([_sample(100 * i, 5 + 2 * i) for i in range(5)]),
        })
        assert locate_bottleneck(execution, k=3) == [(1, "compute")]

    def test_all_turning_up_means_no_bottleneck(self):
        execution = SimpleNamespace(id="q", stages={
            1: _fake_stage([_sample(100 * i, 3 * i) for i in range(5)]),
        })
        assert locate_bottleneck(execution, k=3) == []

    def test_network_threshold(self):
        execution = SimpleNamespace(id="q", stages={
            1: _fake_stage([_sample(100 * i, 3 * i) for i in range(5)]),
        })
        assert locate_bottleneck(
            execution, k=3, nic_utilization={1: 0.95}
        ) == [(1, "network")]

    def test_stale_data(self):
        execution = SimpleNamespace(id="q", stages={
            1: _fake_stage([]),
        })
        with pytest.raises(StaleData):
            locate_bottleneck(execution)

    def test_slow_consumer_flagged_within_three_periods(self):
        """Real receive-buffer dynamics: a consumer that cannot keep up
        never observes the buffer empty, so its turn-up counter freezes
        and three collection periods suffice to flag the stage."""
        rbuf = ExchangeReceiveBuffer(schema=(INT64,))
        rbuf.add_upstream(("u", "t"))
        page = Page.from_rows((INT64,), [(i,) for i in range(512)])
        stop = threading.Event()

        def produce():
            while not stop.is_set():
                if not rbuf.fetch_paused():
                    rbuf.push([page])
                time.sleep(0.001)

        threading.Thread(target=produce, daemon=True).start()
        samples = []
        consumed = 0
        try:
            for _ in range(4):  # collection periods
                deadline = time.monotonic() + 0.1
                while time.monotonic() < deadline:  # slow consumer
                    if rbuf.poll() is not None:
                        consumed += 512
                    time.sleep(0.02)
                samples.append({
                    "ts": time.monotonic(), "rows_total": consumed,
                    "turn_up": {9: {"t0": rbuf.turn_up_counter}},
                    "states": {"t0": "running"},
                })
        finally:
            stop.set()
        execution = SimpleNamespace(id="q", stages={1: _fake_stage(samples)})
        assert locate_bottleneck(execution, k=3) == [(1, "compute")]


@pytest.fixture(scope="module")
def tuner_catalog(tmp_path_factory):
    """Finer splits than the shared dataset so scan progress (claimed
    split by split) tracks wall time closely enough to predict from."""
    out = tmp_path_factory.mktemp("tunerdata")
    return Catalog.load(generate(str(out), scale=0.002, seed=7, splits=24))


@pytest.fixture
def cluster(tuner_catalog):
    coordinator, managers = local_cluster(
        tuner_catalog, workers=2, threads=4, collect_period=0.25
    )
    yield coordinator
    coordinator.shutdown()


def warm_up(coordinator, q, seconds=1.2):
    deadline = time.monotonic() + seconds
    while time.monotonic() < deadline:
        coordinator.collect_now(q.id)
        time.sleep(0.25)


class TestRemainingTime:
    def test_drained_scan_reports_zero(self, cluster):
        q = cluster.submit(SCAN_SQL)
        cluster.results(q.id, timeout=30)
        # re-submit pattern: estimate on a finished-scan stage of a
        # still-running query is exercised via a fresh throttled query
        q2 = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 100000})
        warm_up(cluster, q2, 0.6)
        assert estimate_remaining(q2, 1) >= 0.0
        cluster.results(q2.id, timeout=30)

    def test_no_progress_signal_before_samples(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 2000})
        with pytest.raises(NoProgressSignal):
            estimate_remaining(q, 1)
        cluster.cancel(q.id)

    def test_constant_rate_scan_estimate(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 1200})
        warm_up(cluster, q, 1.5)
        t_remain = estimate_remaining(q, 1)
        t_est = time.monotonic()
        assert t_remain > 0
        cluster.results(q.id, timeout=60)
        actual = q.finished_at - t_est
        assert actual > 0
        assert abs(t_remain - actual) <= 0.35 * actual, \
            f"estimated {t_remain:.2f}s, actual {actual:.2f}s"

    def test_governing_scan_descends_probe_side(self, cluster):
        q = cluster.submit(JOIN_SQL, {"broadcast_threshold": 0,
                                      "scan_rows_per_sec": 3000})
        assert governing_scan(q, 1) == 3  # probe side, not the build scan
        assert governing_scan(q, 2) == 2
        assert governing_scan(q, 0) == 3
        cluster.cancel(q.id)


class TestFilter:
    def test_join_shorter_than_rebuild_rejected(self, cluster):
        q = cluster.submit(JOIN_SQL, {"broadcast_threshold": 0,
                                      "scan_rows_per_sec": 3000})
        warm_up(cluster, q, 1.0)
        q.stages[1].samples[-1]["t_build"] = 1e6  # rebuild never pays off
        with pytest.raises(FilterRejected) as err:
            check_filter(q, 1, 3)
        assert "build time" in str(err.value)
        cluster.cancel(q.id)

    def test_noop_and_finished_rejected(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 3000})
        with pytest.raises(FilterRejected):
            check_filter(q, 1, len(q.stages[1].tasks))
        cluster.results(q.id, timeout=30)
        with pytest.raises(FilterRejected):
            check_filter(q, 1, 3)

    def test_direct_tune_applies_when_accepted(self, cluster):
        q = cluster.submit(JOIN_SQL, {"broadcast_threshold": 0,
                                      "scan_rows_per_sec": 2500})
        warm_up(cluster, q, 1.0)
        result = cluster.tune(q.id, {"op": "direct", "stage": 1,
                                     "target": 2})
        assert result["to"] == 2
        cluster.cancel(q.id)


class TestWhatIf:
    def test_dop_time_list_consistent_with_predictor(self, cluster):
        q = cluster.submit(JOIN_SQL, {"broadcast_threshold": 0,
                                      "scan_rows_per_sec": 2500})
        warm_up(cluster, q, 1.2)
        doc = predict_with_dop(q, 1, 3)
        assert doc["n1"] == 1 and doc["n2"] == 3
        assert doc["t_remain"] > 0
        assert abs(doc["dop_time_list"][3] - doc["t_predicted"]) < 1e-9
        assert doc["dop_time_list"][1] >= doc["dop_time_list"][3] - 1e-9
        times = [doc["dop_time_list"][d]
                 for d in sorted(doc["dop_time_list"])]
        for a, b in zip(times, times[1:]):
            assert b <= a + 1e-9
        cluster.cancel(q.id)


class TestPlanning:
    def test_units_partition_elastic_stages(self, cluster):
        q = cluster.submit(JOIN_SQL, {
            "broadcast_threshold": 0, "insert_shuffle": [3],
            "scan_rows_per_sec": 3000,
        })
        units = {u["scan"]: u for u in build_units(q)}
        assert set(units) == {2, 3}
        assert sorted(units[3]["knobs"]) == [1, 4]
        assert units[3]["prereqs"] == {2}
        assert units[2]["knobs"] == []
        cluster.cancel(q.id)

    def test_satisfied_constraint_needs_no_actions(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 3000})
        warm_up(cluster, q, 1.0)
        assert plan_one_time(cluster, q.id, 3600.0) == []
        cluster.cancel(q.id)

    def test_one_time_matches_brute_force(self, cluster):
        from elastiq.autotuner import (
            MAX_CANDIDATE_DOP, cpu_cap,
        )
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 600})
        warm_up(cluster, q, 1.5)
        t_remain = estimate_remaining(q, 1)
        constraint = t_remain / 2.5  # force an upscale
        cap = cpu_cap(q, 1)
        n1 = q.stages[1].task_dop
        want = None  # exhaustive search over the candidate range
        for dop in range(1, MAX_CANDIDATE_DOP + 1):
            t = predict(
                PredictionInputs(t_remain, 1.0, n1, dop), cap
            ).t_predicted
            if t <= constraint:
                want = dop
                break
        actions = plan_one_time(cluster, q.id, constraint)
        assert actions == [{"op": "task_dop", "stage": 1, "target": want}]
        assert q.stages[1].task_dop == want
        cluster.results(q.id, timeout=60)


class TestMonitor:
    def test_monitor_raises_dop_to_meet_constraint(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 700})
        warm_up(cluster, q, 1.0)
        t_remain = estimate_remaining(q, 1)
        constraint = q.elapsed() + t_remain / 2.5
        cluster.tune(q.id, {"op": "monitor", "enable": True,
                            "constraint": constraint})
        monitor = Monitor(cluster, period=0.4)
        monitor.start()
        cluster.results(q.id, timeout=60)
        monitor.stop()
        tuned = [e for e in q.events
                 if e["kind"] == "auto_tune" and e["mode"] == "monitor"]
        assert tuned, "monitor never acted"
        assert any(e["target"] > 1 for e in tuned)
        assert q.elapsed() <= constraint * 1.2

    def test_monitor_steps_down_when_ahead(self, cluster):
        q = cluster.submit(SCAN_SQL, {"scan_rows_per_sec": 250,
                                      "task_dop": 4})
        warm_up(cluster, q, 0.8)
        t_remain = estimate_remaining(q, 1)
        cluster.tune(q.id, {
            "op": "monitor", "enable": True,
            "constraint": q.elapsed() + t_remain * 6,
        })
        monitor = Monitor(cluster, period=0.4)
        monitor.start()
        cluster.results(q.id, timeout=60)
        monitor.stop()
        downs = [e for e in q.events
                 if e["kind"] == "auto_tune" and e["mode"] == "monitor"
                 and e["target"] < 4]
        assert downs, "monitor never reduced parallelism"
