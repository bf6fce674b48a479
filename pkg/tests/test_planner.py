import pytest

from conftest import Q3_STYLE, TWO_WAY_JOIN
from elastiq.errors import InvalidTarget
from elastiq.plan import (
    ExchangeSource,
    Fragment,
    StageTree,
    build_pipelines,
    fragment,
    insert_shuffle_stage,
    reassemble,
    to_physical,
)
from elastiq.plan.fragments import walk_fragment
from elastiq.plan.physical import (
    ExchangeNode,
    FinalAgg,
    HashJoin,
    LocalExchangeNode,
    OutputNode,
    PartialAgg,
    PFilter,
    STATEFUL_OPS,
    STATELESS_OPS,
    TableScan,
    walk_physical,
)
from elastiq.sql import bind, parse


def plan_for(sql, catalog, threshold=None):
    bound = bind(parse(sql), catalog)
    kwargs = {} if threshold is None else {"broadcast_threshold": threshold}
    return to_physical(bound, catalog, **kwargs)


class TestToPhysical:
    def test_three_table_query_fig4_shape(self, catalog):
        tree = fragment(plan_for(Q3_STYLE, catalog))
        assert sorted(tree.stages) == [0, 1, 2, 3, 4, 5]
        assert tree.stages[0].inputs == [1]
        # build side numbered first: customer scan = 2, lower join = 3
        assert tree.stages[1].inputs == [2, 3]
        assert tree.stages[3].inputs == [4, 5]
        assert tree.stages[2].is_scan_stage()
        s4 = tree.stages[4]
        assert any(isinstance(n, TableScan) and n.table == "orders"
                   for n in walk_fragment(s4.plan))
        # the o_orderdate predicate was pushed down into the orders stage
        assert any(isinstance(n, PFilter) for n in walk_fragment(s4.plan))
        assert any(isinstance(n, TableScan) and n.table == "lineitem"
                   for n in walk_fragment(tree.stages[5].plan))
        assert tree.stages[1].has_join() and tree.stages[3].has_join()

    def test_single_table_count_two_stages(self, catalog):
        tree = fragment(plan_for("SELECT count(x) FROM t", catalog))
        assert sorted(tree.stages) == [0, 1]
        assert any(isinstance(n, FinalAgg) for n in walk_fragment(tree.stages[0].plan))
        assert any(isinstance(n, PartialAgg) for n in walk_fragment(tree.stages[1].plan))
        assert tree.stages[1].output_partitioning == {"kind": "gather"}

    def test_two_way_join_partitioned_shape(self, catalog):
        tree = fragment(plan_for(TWO_WAY_JOIN, catalog, threshold=0))
        assert sorted(tree.stages) == [0, 1, 2, 3]
        join_stage = tree.stages[1]
        assert join_stage.has_partitioned_join()
        assert join_stage.inputs == [2, 3]
        # build child first: orders feeds the build with a page cache
        s2, s3 = tree.stages[2], tree.stages[3]
        assert any(isinstance(n, TableScan) and n.table == "orders"
                   for n in walk_fragment(s2.plan))
        assert s2.cache_pages and s2.output_partitioning["kind"] == "hash"
        assert any(isinstance(n, TableScan) and n.table == "lineitem"
                   for n in walk_fragment(s3.plan))
        assert not s3.cache_pages and s3.output_partitioning["kind"] == "hash"

    def test_broadcast_when_small_build_side(self, catalog):
        phys = plan_for(TWO_WAY_JOIN, catalog)  # tiny tables -> broadcast
        join = next(n for n in walk_physical(phys) if isinstance(n, HashJoin))
        assert join.broadcast
        tree = fragment(phys)
        build_stage = tree.stages[tree.stages[1].inputs[0]]
        assert build_stage.output_partitioning == {"kind": "broadcast"}
        assert build_stage.cache_pages

    def test_final_agg_sits_above_gather_exchange(self, catalog):
        phys = plan_for("SELECT k, sum(v) FROM nums GROUP BY k", catalog)
        for n in walk_physical(phys):
            if isinstance(n, FinalAgg):
                assert isinstance(n.child, ExchangeNode)
                assert n.child.partitioning == {"kind": "gather"}

    def test_join_build_passes_through_exchange(self, catalog):
        phys = plan_for(TWO_WAY_JOIN, catalog, threshold=0)
        for n in walk_physical(phys):
            if isinstance(n, HashJoin):
                assert isinstance(n.build, LocalExchangeNode)
                assert isinstance(n.build.child, ExchangeNode)


class TestFragment:
    @pytest.mark.parametrize(
        "sql",
        [
            Q3_STYLE,
            TWO_WAY_JOIN,
            "SELECT x FROM t",
            "SELECT k, count(v), avg(f) FROM nums WHERE k < 100 GROUP BY k",
            "SELECT k, sum(v) AS total FROM nums GROUP BY k ORDER BY k LIMIT 3",
        ],
    )
    def test_structural_round_trip(self, sql, catalog):
        phys = plan_for(sql, catalog, threshold=0)
        tree = fragment(phys)
        assert reassemble(tree) == phys

    def test_no_exchange_single_stage(self):
        tree = fragment(OutputNode(TableScan("t", ["int64"])))
        assert sorted(tree.stages) == [0]
        assert tree.stages[0].inputs == []

    def test_final_agg_stages_fixed_one(self, catalog):
        tree = fragment(plan_for("SELECT count(x) FROM t", catalog))
        assert tree.stages[0].elasticity_class == "fixed-one"
        assert tree.stages[1].elasticity_class == "elastic"

    def test_every_operator_covered_exactly_once(self, catalog):
        phys = plan_for(Q3_STYLE, catalog, threshold=0)
        expected = 0
        for n in walk_physical(phys):
            if isinstance(n, HashJoin):
                expected += 2  # probe + build
            elif isinstance(n, LocalExchangeNode):
                expected += 2  # sink + source
            else:
                expected += 1
        tree = fragment(phys)
        got = sum(
            len(p.ops) for f in tree.stages.values() for p in build_pipelines(f)
        )
        # non-root fragments gain a task_output not present in the physical tree
        got -= len(tree.stages) - 1
        assert got == expected


class TestPipelines:
    def join_stage_fragment(self, catalog):
        tree = fragment(plan_for(TWO_WAY_JOIN, catalog, threshold=0))
        return tree.stages[1]

    def test_join_fragment_three_pipelines_fig6(self, catalog):
        specs = build_pipelines(self.join_stage_fragment(catalog))
        kinds = [[op["op"] for op in s.ops] for s in specs]
        assert kinds == [
            ["exchange", "local_exchange_sink"],
            ["local_exchange_source", "hash_build"],
            ["exchange", "hash_probe", "partial_agg", "task_output"],
        ]
        assert sum(1 for s in specs if s.is_output) == 1

    def test_scan_fragment_single_pipeline(self, catalog):
        tree = fragment(plan_for("SELECT count(v) FROM nums WHERE v > 3", catalog))
        specs = build_pipelines(tree.stages[1])
        assert len(specs) == 1
        assert [op["op"] for op in specs[0].ops] == [
            "table_scan", "filter", "partial_agg", "task_output",
        ]

    def test_two_join_fragment_breaker_counting_oracle(self):
        # synthetic stage-1-of-Q3 analog: two joins inside one fragment
        inner = HashJoin(
            probe=ExchangeSource(5, {"kind": "hash", "keys": [0]}),
            build=LocalExchangeNode(
                ExchangeSource(4, {"kind": "hash", "keys": [0]}, for_build=True), [0]
            ),
            probe_keys=[0], build_keys=[0], broadcast=False,
            probe_width=1, build_width=1,
        )
        outer = HashJoin(
            probe=inner,
            build=LocalExchangeNode(
                ExchangeSource(2, {"kind": "hash", "keys": [0]}, for_build=True), [0]
            ),
            probe_keys=[0], build_keys=[0], broadcast=False,
            probe_width=2, build_width=1,
        )
        frag = Fragment(1, outer)
        specs = build_pipelines(frag)
        n_joins = 2
        n_local_exchanges = 2
        assert len(specs) == 1 + n_joins + n_local_exchanges

    def test_pipeline_specs_survive_json(self, catalog):
        import json

        for f in fragment(plan_for(Q3_STYLE, catalog, threshold=0)).stages.values():
            for spec in build_pipelines(f):
                again = spec.from_json(json.loads(json.dumps(spec.to_json())))
                assert again.ops == spec.ops

    def test_operator_classification_total(self, catalog):
        seen = set()
        for f in fragment(plan_for(Q3_STYLE, catalog, threshold=0)).stages.values():
            for spec in build_pipelines(f):
                seen.update(op["op"] for op in spec.ops)
        for f in fragment(
            plan_for("SELECT k, sum(v) FROM nums GROUP BY k ORDER BY k LIMIT 2", catalog)
        ).stages.values():
            for spec in build_pipelines(f):
                seen.update(op["op"] for op in spec.ops)
        assert seen <= (STATELESS_OPS | STATEFUL_OPS)


class TestInsertShuffleStage:
    def tree(self, catalog):
        return fragment(plan_for(TWO_WAY_JOIN, catalog, threshold=0))

    def test_insert_under_build_scan(self, catalog):
        tree = self.tree(catalog)
        new = insert_shuffle_stage(tree, 2)
        assert sorted(new.stages) == [0, 1, 2, 3, 4]
        shuffle = new.stages[4]
        assert shuffle.inputs == [2]
        assert shuffle.output_partitioning["kind"] == "hash"
        assert shuffle.cache_pages
        assert new.stages[1].inputs == [4, 3]
        assert new.stages[2].output_partitioning == {"kind": "gather"}
        assert not new.stages[2].cache_pages
        specs = build_pipelines(shuffle)
        assert [[op["op"] for op in s.ops] for s in specs] == [["exchange", "task_output"]]
        # pre-existing stage ids unchanged
        assert set(tree.stages) <= set(new.stages)

    def test_gather_feeding_stage_rejected(self, catalog):
        tree = fragment(plan_for("SELECT count(x) FROM t", catalog))
        with pytest.raises(InvalidTarget):
            insert_shuffle_stage(tree, 1)

    def test_non_scan_stage_rejected(self, catalog):
        tree = self.tree(catalog)
        with pytest.raises(InvalidTarget):
            insert_shuffle_stage(tree, 1)

    def test_plan_json_serializable(self, catalog):
        import json

        doc = self.tree(catalog).to_json()
        assert json.loads(json.dumps(doc))["root"] == 0
