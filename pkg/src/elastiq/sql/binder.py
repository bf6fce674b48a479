"""Bind a logical plan to a catalog.

Annotates every column reference with (table, column index, type), checks
types, and computes each node's output schema.  Binding is idempotent and
never mutates its input plan.
"""

from __future__ import annotations

import copy

from ..errors import TypeMismatch, UnknownColumn
from ..pages import DATE, FLOAT64, INT64, STRING
from .ast import (
    AggCall,
    Aggregate,
    Arith,
    BoolAnd,
    ColumnRef,
    Comparison,
    Filter,
    Join,
    Limit,
    Literal,
    Project,
    Scan,
    Sort,
)

_NUMERIC = (INT64, FLOAT64)


def _resolve(ref, prov):
    hits = [
        i
        for i, (tbl, name, _) in enumerate(prov)
        if name == ref.name and (ref.table is None or ref.table == tbl)
    ]
    if not hits:
        raise UnknownColumn(f"unknown column: {ref.display()}")
    if len(hits) > 1:
        raise UnknownColumn(f"ambiguous column: {ref.display()}")
    i = hits[0]
    ref.index = i
    ref.ctype = prov[i][2]
    return ref.ctype


def _comparable(a, b):
    if a in _NUMERIC and b in _NUMERIC:
        return True
    return a == b


def _bind_expr(e, prov):
    """Returns the expression's type; annotates in place."""
    if isinstance(e, ColumnRef):
        return _resolve(e, prov)
    if isinstance(e, Literal):
        return e.ctype
    if isinstance(e, Arith):
        tl = _bind_expr(e.left, prov)
        tr = _bind_expr(e.right, prov)
        if tl not in _NUMERIC or tr not in _NUMERIC:
            raise TypeMismatch(f"arithmetic requires numeric operands, got {tl}/{tr}")
        if e.op == "/":
            return FLOAT64
        return INT64 if tl == tr == INT64 else FLOAT64
    if isinstance(e, Comparison):
        tl = _bind_expr(e.left, prov)
        tr = _bind_expr(e.right, prov)
        if not _comparable(tl, tr):
            raise TypeMismatch(f"cannot compare {tl} with {tr}")
        return "bool"
    if isinstance(e, BoolAnd):
        for t in e.terms:
            _bind_expr(t, prov)
        return "bool"
    if isinstance(e, AggCall):
        ta = _bind_expr(e.arg, prov)
        if e.func == "count":
            e.ctype = INT64
        elif e.func == "avg":
            if ta not in _NUMERIC:
                raise TypeMismatch(f"avg over non-numeric type {ta}")
            e.ctype = FLOAT64
        elif e.func == "sum":
            if ta not in _NUMERIC:
                raise TypeMismatch(f"sum over non-numeric type {ta}")
            e.ctype = ta
        else:  # min / max
            e.ctype = ta
        return e.ctype
    raise TypeError(f"not an expression: {e!r}")


def _bind_node(node, catalog):
    """Returns provenance [(table, name, type)] of the node's output rows."""
    if isinstance(node, Scan):
        table = catalog.table(node.table)
        node.schema = list(table.columns)
        return [(table.name, c, t) for c, t in table.columns]

    if isinstance(node, Filter):
        prov = _bind_node(node.child, catalog)
        if not isinstance(node.predicate, (Comparison, BoolAnd)):
            raise TypeMismatch("filter predicate must be a comparison or AND of comparisons")
        _bind_expr(node.predicate, prov)
        node.schema = list(node.child.schema)
        return prov

    if isinstance(node, Join):
        lprov = _bind_node(node.left, catalog)
        rprov = _bind_node(node.right, catalog)
        for i, (a, b) in enumerate(zip(node.left_keys, node.right_keys)):
            try:
                ta = _resolve(a, lprov)
                tb = _resolve(b, rprov)
            except UnknownColumn:
                # keys were written in the opposite order; swap sides
                ta = _resolve(b, lprov)
                tb = _resolve(a, rprov)
                node.left_keys[i], node.right_keys[i] = b, a
            if ta != tb:
                raise TypeMismatch(f"join key types differ: {ta} vs {tb}")
        node.schema = list(node.left.schema) + list(node.right.schema)
        return lprov + rprov

    if isinstance(node, Project):
        prov = _bind_node(node.child, catalog)
        node.schema = [
            (name, _bind_expr(e, prov)) for e, name in zip(node.exprs, node.names)
        ]
        return [(None, name, t) for name, t in node.schema]

    if isinstance(node, Aggregate):
        prov = _bind_node(node.child, catalog)
        key_types = [_resolve(g, prov) for g in node.group_keys]
        agg_types = [_bind_expr(a, prov) for a in node.aggs]
        node.schema = list(zip(node.names, key_types + agg_types))
        out = [(g.table, g.name, t) for g, t in zip(node.group_keys, key_types)]
        out += [
            (None, name, t)
            for name, t in zip(node.names[len(node.group_keys):], agg_types)
        ]
        return out

    if isinstance(node, Sort):
        prov = _bind_node(node.child, catalog)
        for ref, _ in node.keys:
            _resolve(ref, prov)
        node.schema = list(node.child.schema)
        return prov

    if isinstance(node, Limit):
        prov = _bind_node(node.child, catalog)
        node.schema = list(node.child.schema)
        return prov

    raise TypeError(f"unknown plan node: {type(node).__name__}")


def bind(plan, catalog):
    """Bind a (possibly already bound) plan against the catalog."""
    bound = copy.deepcopy(plan)
    _bind_node(bound, catalog)
    return bound
