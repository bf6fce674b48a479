"""Expand a fragment into pipeline specifications.

Pipeline breakers are the local exchange (split into sink + source) and
the hash join (split into probe + build).  Each resulting maximal operator
chain becomes one pipeline; exactly one pipeline per fragment ends in the
task output.  Operator descriptors are plain JSON so the coordinator can
ship them to workers over the control plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..sql.serde import expr_to_json
from .fragments import ExchangeSource
from .physical import (
    FinalAgg,
    HashJoin,
    LocalExchangeNode,
    OutputNode,
    PartialAgg,
    PFilter,
    PLimit,
    PProject,
    PSort,
    TableScan,
)

SOURCE_OPS = ("table_scan", "exchange", "local_exchange_source")
TAIL_OPS = ("task_output", "local_exchange_sink", "hash_build")


@dataclass
class PipelineSpec:
    pipeline_id: int
    ops: list  # operator descriptors, head source first
    elasticity: str  # "tunable" | "fixed"

    @property
    def head_kind(self):
        return self.ops[0]["op"]

    @property
    def tail_kind(self):
        return self.ops[-1]["op"]

    @property
    def is_build(self):
        return self.tail_kind == "hash_build"

    @property
    def is_output(self):
        return self.tail_kind == "task_output"

    def to_json(self):
        return {"id": self.pipeline_id, "ops": self.ops, "elasticity": self.elasticity}

    @staticmethod
    def from_json(d):
        return PipelineSpec(d["id"], d["ops"], d["elasticity"])


def _op_descriptor(node):
    if isinstance(node, TableScan):
        return {"op": "table_scan", "table": node.table, "types": list(node.types)}
    if isinstance(node, ExchangeSource):
        return {"op": "exchange", "source_stage": node.stage_id}
    if isinstance(node, PFilter):
        return {"op": "filter", "predicate": expr_to_json(node.predicate)}
    if isinstance(node, PProject):
        return {
            "op": "project",
            "exprs": [expr_to_json(e) for e in node.exprs],
            "types": list(node.types),
        }
    if isinstance(node, PartialAgg):
        return {
            "op": "partial_agg",
            "keys": list(node.keys),
            "aggs": [{"func": a.func, "arg": expr_to_json(a.arg)} for a in node.aggs],
            "out_types": list(node.out_types),
        }
    if isinstance(node, FinalAgg):
        return {
            "op": "final_agg",
            "key_count": node.key_count,
            "aggs": [{"func": a.func} for a in node.aggs],
            "out_types": list(node.out_types),
        }
    if isinstance(node, PSort):
        return {"op": "sort", "keys": [[i, bool(a)] for i, a in node.keys]}
    if isinstance(node, PLimit):
        return {"op": "limit", "n": node.n}
    raise TypeError(f"no descriptor for node {type(node).__name__}")


def build_pipelines(frag):
    """Returns the fragment's pipelines; output pipeline is emitted last."""
    pipelines = []
    counters = {"lex": 0, "join": 0}

    def emit(ops, elasticity):
        spec = PipelineSpec(len(pipelines), ops, elasticity)
        pipelines.append(spec)
        return spec

    base_elastic = "fixed" if frag.elasticity_class == "fixed-one" else "tunable"

    def descend(node, above):
        """above: descriptors that sit on top of `node` (closest first)."""
        if isinstance(node, (PFilter, PProject, PartialAgg, FinalAgg, PSort, PLimit)):
            descend(node.child, [_op_descriptor(node)] + above)
        elif isinstance(node, OutputNode):
            descend(node.child, [{"op": "task_output"}] + above)
        elif isinstance(node, HashJoin):
            join_id = counters["join"]
            counters["join"] += 1
            build_side(node.build, node, join_id)
            probe_op = {
                "op": "hash_probe",
                "join": join_id,
                "keys": list(node.probe_keys),
                "probe_types": list(node.probe_types),
                "build_types": list(node.build_types),
            }
            descend(node.probe, [probe_op] + above)
        elif isinstance(node, (TableScan, ExchangeSource)):
            ops = [_op_descriptor(node)] + above
            emit(ops, base_elastic)
        elif isinstance(node, LocalExchangeNode):
            # a local exchange outside a join build position: split here
            lex_id = counters["lex"]
            counters["lex"] += 1
            source = {"op": "local_exchange_source", "lex": lex_id}
            emit_later = [source] + above
            descend(node.child, [{"op": "local_exchange_sink", "lex": lex_id,
                                  "keys": list(node.keys)}])
            emit(emit_later, base_elastic)
        else:
            raise TypeError(f"unexpected node {type(node).__name__}")

    def build_side(node, join, join_id):
        build_op = {"op": "hash_build", "join": join_id, "keys": list(join.build_keys)}
        if isinstance(node, LocalExchangeNode):
            lex_id = counters["lex"]
            counters["lex"] += 1
            sink = {"op": "local_exchange_sink", "lex": lex_id,
                    "keys": list(node.keys)}
            # sink pipeline first, then source->build, matching plan order
            descend(node.child, [sink])
            emit([{"op": "local_exchange_source", "lex": lex_id}, build_op],
                 base_elastic)
        else:
            descend(node, [build_op])

    descend(frag.plan if isinstance(frag.plan, OutputNode) else OutputNode(frag.plan),
            [])
    return pipelines
