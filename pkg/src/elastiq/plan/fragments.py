"""Fragmentation: cut the physical plan at exchange nodes into a stage tree.

Stage ids are assigned by pre-order traversal (root = 0) with the build
side of a join visited before the probe side, and are never reused within
a query.  ``insert_shuffle_stage`` splices a dedicated shuffle stage
between a table-scan stage and its consumer so shuffle work can be scaled
independently at runtime.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from ..errors import InvalidTarget
from .physical import (
    ExchangeNode,
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
    children_of,
    walk_physical,
)


@dataclass
class ExchangeSource:
    """Placeholder left where an exchange was cut; the fragment pulls pages
    from the tasks of ``stage_id``."""

    stage_id: int
    partitioning: dict
    for_build: bool = False

    children = ()


@dataclass
class Fragment:
    id: int
    plan: object
    inputs: list = field(default_factory=list)
    output_partitioning: dict = field(default_factory=lambda: {"kind": "gather"})
    elasticity_class: str = "elastic"  # or "fixed-one"
    cache_pages: bool = False  # retain output pages for join-build reshuffling

    def is_scan_stage(self):
        return any(isinstance(n, TableScan) for n in walk_fragment(self.plan))

    def has_partitioned_join(self):
        return any(
            isinstance(n, HashJoin) and not n.broadcast
            for n in walk_fragment(self.plan)
        )

    def has_join(self):
        return any(isinstance(n, HashJoin) for n in walk_fragment(self.plan))


def walk_fragment(node):
    yield node
    if isinstance(node, ExchangeSource):
        return
    for c in children_of(node):
        yield from walk_fragment(c)


@dataclass
class StageTree:
    stages: dict
    root_stage_id: int = 0

    @property
    def edges(self):
        return {sid: list(f.inputs) for sid, f in self.stages.items()}

    def parent_of(self, sid):
        for pid, f in self.stages.items():
            if sid in f.inputs:
                return pid
        return None

    def to_json(self):
        return {
            "root": self.root_stage_id,
            "stages": [
                {
                    "id": f.id,
                    "inputs": list(f.inputs),
                    "output_partitioning": f.output_partitioning,
                    "elasticity": f.elasticity_class,
                    "cache_pages": f.cache_pages,
                    "plan": _describe(f.plan),
                }
                for f in sorted(self.stages.values(), key=lambda f: f.id)
            ],
        }

    def to_json_str(self):
        return json.dumps(self.to_json(), indent=2)


def _describe(node):
    name = type(node).__name__
    d = {"node": name}
    if isinstance(node, TableScan):
        d["table"] = node.table
    if isinstance(node, ExchangeSource):
        d["source_stage"] = node.stage_id
        d["partitioning"] = node.partitioning
    if isinstance(node, HashJoin):
        d["broadcast"] = node.broadcast
    if isinstance(node, PLimit):
        d["n"] = node.n
    kids = [] if isinstance(node, ExchangeSource) else [
        _describe(c) for c in children_of(node)
    ]
    if kids:
        d["children"] = kids
    return d


def fragment(physical_root):
    """Cut at every ExchangeNode; returns the stage tree."""
    stages = {}
    counter = iter(range(10**6))

    def build(plan, fid):
        sources = []

        def rewrite(node):
            if isinstance(node, ExchangeNode):
                src = ExchangeSource(-1, node.partitioning, node.for_build)
                sources.append((node, src))
                return src
            clone = copy.copy(node)
            if isinstance(node, HashJoin):
                clone.build = rewrite(node.build)
                clone.probe = rewrite(node.probe)
            elif children_of(node):
                clone.child = rewrite(node.child)
            return clone

        frag = Fragment(fid, rewrite(plan))
        stages[fid] = frag
        for ex_node, src in sources:
            cid = next(counter)
            src.stage_id = cid
            frag.inputs.append(cid)
            child = build(ex_node.child, cid)
            child.output_partitioning = ex_node.partitioning
            child.cache_pages = ex_node.for_build
        return frag

    next(counter)  # id 0 for the root
    root = build(physical_root, 0)
    root.elasticity_class = "fixed-one"
    for f in stages.values():
        if any(isinstance(n, FinalAgg) for n in walk_fragment(f.plan)):
            f.elasticity_class = "fixed-one"
    return StageTree(stages, root.id)


def reassemble(tree, sid=None):
    """Inverse of fragment(): splice child fragments back at their exchange
    positions.  Test oracle for the structural round-trip property."""
    sid = tree.root_stage_id if sid is None else sid
    frag = tree.stages[sid]

    def rebuild(node):
        if isinstance(node, ExchangeSource):
            return ExchangeNode(
                reassemble(tree, node.stage_id), node.partitioning, node.for_build
            )
        clone = copy.copy(node)
        if isinstance(node, HashJoin):
            clone.build = rebuild(node.build)
            clone.probe = rebuild(node.probe)
        elif children_of(node):
            clone.child = rebuild(node.child)
        return clone

    return rebuild(frag.plan)


def insert_shuffle_stage(tree, below_stage):
    """Insert a stage of just exchange -> task output between a table-scan
    stage and its consumer; the new stage takes over hash partitioning."""
    if below_stage not in tree.stages:
        raise InvalidTarget(f"no such stage: {below_stage}")
    frag = tree.stages[below_stage]
    if not frag.is_scan_stage():
        raise InvalidTarget(f"stage {below_stage} is not a table-scan stage")
    if frag.output_partitioning.get("kind") != "hash":
        raise InvalidTarget(
            f"stage {below_stage} does not feed a hash-partitioned exchange"
        )
    parent_id = tree.parent_of(below_stage)
    assert parent_id is not None
    new_tree = copy.deepcopy(tree)
    new_id = max(new_tree.stages) + 1

    scan = new_tree.stages[below_stage]
    shuffle = Fragment(
        new_id,
        ExchangeSource(below_stage, {"kind": "gather"}),
        inputs=[below_stage],
        output_partitioning=dict(scan.output_partitioning),
        elasticity_class="elastic",
        cache_pages=scan.cache_pages,
    )
    scan.output_partitioning = {"kind": "gather"}
    scan.cache_pages = False
    new_tree.stages[new_id] = shuffle

    parent = new_tree.stages[parent_id]
    parent.inputs = [new_id if i == below_stage else i for i in parent.inputs]
    for n in walk_fragment(parent.plan):
        if isinstance(n, ExchangeSource) and n.stage_id == below_stage:
            n.stage_id = new_id
    return new_tree
