"""Physical planning: bound logical plan -> physical operator tree.

The physical tree introduces exchange nodes (fragment boundaries), local
exchange nodes (intra-task repartitioning ahead of join build pipelines)
and splits every aggregation into a partial and a final aggregation so the
partial side stays stateless and freely parallelizable.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

from ..pages import FLOAT64, INT64
from ..sql.ast import (
    Aggregate,
    BoolAnd,
    ColumnRef,
    Filter,
    Join,
    Limit,
    Project,
    Scan,
    Sort,
    walk,
)

DEFAULT_BROADCAST_THRESHOLD = 64 << 20

GATHER = {"kind": "gather"}


def hash_part(keys):
    return {"kind": "hash", "keys": list(keys)}


BROADCAST = {"kind": "broadcast"}


# -- physical nodes ----------------------------------------------------------

@dataclass
class TableScan:
    table: str
    types: list  # column types in table order

    children = ()


@dataclass
class PFilter:
    child: object
    predicate: object


@dataclass
class PProject:
    child: object
    exprs: list
    types: list


@dataclass
class AggSpec:
    func: str
    arg: object  # bound expression over the aggregation input


@dataclass
class PartialAgg:
    child: object
    keys: list  # input column indexes of the group keys
    aggs: list  # [AggSpec]
    out_types: list


@dataclass
class FinalAgg:
    child: object
    key_count: int
    aggs: list  # [AggSpec] (arg unused at the final level)
    out_types: list


@dataclass
class HashJoin:
    probe: object
    build: object
    probe_keys: list
    build_keys: list
    broadcast: bool
    probe_width: int
    build_width: int
    probe_types: list = field(default_factory=list)
    build_types: list = field(default_factory=list)


@dataclass
class ExchangeNode:
    child: object
    partitioning: dict
    for_build: bool = False


@dataclass
class LocalExchangeNode:
    child: object
    keys: list


@dataclass
class PSort:
    child: object
    keys: list  # [(index, ascending)]


@dataclass
class PLimit:
    child: object
    n: int


@dataclass
class OutputNode:
    child: object


_UNARY = (PFilter, PProject, PartialAgg, FinalAgg, ExchangeNode, LocalExchangeNode,
          PSort, PLimit, OutputNode)


def children_of(node):
    if isinstance(node, HashJoin):
        # build side first: fragment numbering and pipeline assembly both
        # visit the build side before the probe side
        return (node.build, node.probe)
    if isinstance(node, _UNARY):
        return (node.child,)
    return ()


def walk_physical(node):
    yield node
    for c in children_of(node):
        yield from walk_physical(c)


STATELESS_OPS = {
    "filter", "project", "local_exchange_sink", "local_exchange_source",
    "exchange", "task_output", "table_scan", "partial_agg",
}
STATEFUL_OPS = {"final_agg", "hash_build", "hash_probe", "sort", "limit"}


# -- predicate pushdown ------------------------------------------------------

def _conjuncts(pred):
    if isinstance(pred, BoolAnd):
        return list(pred.terms)
    return [pred]


def _ref_indexes(expr):
    return [e.index for e in _walk_expr(expr) if isinstance(e, ColumnRef)]


def _walk_expr(e):
    yield e
    for attr in ("left", "right", "arg"):
        sub = getattr(e, attr, None)
        if sub is not None:
            yield from _walk_expr(sub)
    for t in getattr(e, "terms", ()):
        yield from _walk_expr(t)


def _shift_refs(expr, delta):
    for e in _walk_expr(expr):
        if isinstance(e, ColumnRef):
            e.index += delta


def _attach_filter(node, conj):
    if isinstance(node, Filter):
        terms = _conjuncts(node.predicate) + [conj]
        node.predicate = BoolAnd(terms)
        return node
    return Filter(node, conj, schema=list(node.schema))


def _push_into(node, conj):
    """Push a conjunct as deep as its column references allow."""
    if isinstance(node, Join):
        lw = len(node.left.schema)
        idxs = _ref_indexes(conj)
        if idxs and all(i < lw for i in idxs):
            node.left = _push_into(node.left, conj)
            return node
        if idxs and all(i >= lw for i in idxs):
            _shift_refs(conj, -lw)
            node.right = _push_into(node.right, conj)
            return node
        return _attach_filter(node, conj)
    if isinstance(node, Filter):
        node.child = _push_into(node.child, conj)
        return node
    return _attach_filter(node, conj)


def push_filters(plan):
    """Move single-side WHERE conjuncts below the joins they apply to."""
    if isinstance(plan, (Project, Aggregate, Sort, Limit)):
        plan.child = push_filters(plan.child)
        return plan
    if isinstance(plan, Filter) and isinstance(plan.child, Join):
        join = plan.child
        for conj in _conjuncts(plan.predicate):
            join = _push_into(join, conj)
        return join
    return plan


# -- logical -> physical -----------------------------------------------------

def _scan_bytes(node, catalog):
    total = 0
    for n in walk(node):
        if isinstance(n, Scan):
            total += catalog.table(n.table).total_bytes()
    return total


def _partial_layout(group_types, aggs):
    """Partial aggregation output types: keys then per-aggregate state columns."""
    types = list(group_types)
    for a in aggs:
        if a.func == "count":
            types.append(INT64)
        elif a.func == "avg":
            types.extend((FLOAT64, INT64))
        else:  # sum/min/max keep the aggregate's own output type as state
            types.append(a.ctype)
    return types


class _Converter:
    def __init__(self, catalog, broadcast_threshold):
        self.catalog = catalog
        self.broadcast_threshold = broadcast_threshold

    def convert(self, node):
        if isinstance(node, Scan):
            return TableScan(node.table, [t for _, t in node.schema])
        if isinstance(node, Filter):
            return PFilter(self.convert(node.child), node.predicate)
        if isinstance(node, Project):
            return PProject(self.convert(node.child), list(node.exprs),
                            [t for _, t in node.schema])
        if isinstance(node, Join):
            return self.convert_join(node)
        if isinstance(node, Aggregate):
            return self.convert_aggregate(node)
        if isinstance(node, Sort):
            return PSort(self.convert(node.child),
                         [(ref.index, asc) for ref, asc in node.keys])
        if isinstance(node, Limit):
            return PLimit(self.convert(node.child), node.n)
        raise TypeError(f"unknown logical node: {type(node).__name__}")

    def convert_join(self, node):
        probe = self.convert(node.left)
        build = self.convert(node.right)
        probe_keys = [r.index for r in node.left_keys]
        build_keys = [r.index for r in node.right_keys]
        broadcast = False
        if self.catalog is not None:
            broadcast = _scan_bytes(node.right, self.catalog) < self.broadcast_threshold
        build_part = BROADCAST if broadcast else hash_part(build_keys)
        probe_part = GATHER if broadcast else hash_part(probe_keys)
        build_side = LocalExchangeNode(
            ExchangeNode(build, build_part, for_build=True), build_keys
        )
        probe_side = ExchangeNode(probe, probe_part)
        return HashJoin(
            probe_side,
            build_side,
            probe_keys,
            build_keys,
            broadcast,
            probe_width=len(node.left.schema),
            build_width=len(node.right.schema),
            probe_types=[t for _, t in node.left.schema],
            build_types=[t for _, t in node.right.schema],
        )

    def convert_aggregate(self, node):
        child = self.convert(node.child)
        keys = [g.index for g in node.group_keys]
        aggs = [AggSpec(a.func, a.arg) for a in node.aggs]
        group_types = [g.ctype for g in node.group_keys]
        partial_types = _partial_layout(group_types, node.aggs)
        out_types = [t for _, t in node.schema]
        partial = PartialAgg(child, keys, aggs, partial_types)
        return FinalAgg(
            ExchangeNode(partial, dict(GATHER)), len(keys), aggs, out_types
        )


def to_physical(plan, catalog=None, broadcast_threshold=DEFAULT_BROADCAST_THRESHOLD):
    """Convert a bound logical plan into a physical plan rooted at OutputNode.

    Total on bound plans.  The root chain (Output / Sort / Limit / Project /
    FinalAggregate) always sits above a single-partition exchange so the
    root fragment runs with parallelism fixed at 1.
    """
    plan = push_filters(copy.deepcopy(plan))
    conv = _Converter(catalog, broadcast_threshold)
    top = conv.convert(plan)

    # ensure the root chain is separated from elastic stages by an exchange
    chain_tail = None
    node = top
    while isinstance(node, (PLimit, PSort, PProject)):
        chain_tail = node
        node = node.child
    if not isinstance(node, (FinalAgg, ExchangeNode)):
        gather = ExchangeNode(node, dict(GATHER))
        if chain_tail is None:
            top = gather
        else:
            chain_tail.child = gather
    return OutputNode(top)
