"""JSON encoding of bound expressions, used to ship operator specs to workers."""

from __future__ import annotations

from .ast import AggCall, Arith, BoolAnd, ColumnRef, Comparison, Literal


def expr_to_json(e):
    if isinstance(e, ColumnRef):
        return {"kind": "col", "name": e.name, "index": e.index, "ctype": e.ctype}
    if isinstance(e, Literal):
        return {"kind": "lit", "value": e.value, "ctype": e.ctype}
    if isinstance(e, Comparison):
        return {
            "kind": "cmp",
            "op": e.op,
            "left": expr_to_json(e.left),
            "right": expr_to_json(e.right),
        }
    if isinstance(e, BoolAnd):
        return {"kind": "and", "terms": [expr_to_json(t) for t in e.terms]}
    if isinstance(e, Arith):
        return {
            "kind": "arith",
            "op": e.op,
            "left": expr_to_json(e.left),
            "right": expr_to_json(e.right),
        }
    if isinstance(e, AggCall):
        return {"kind": "agg", "func": e.func, "arg": expr_to_json(e.arg), "ctype": e.ctype}
    raise TypeError(f"not an expression: {e!r}")


def expr_from_json(d):
    kind = d["kind"]
    if kind == "col":
        return ColumnRef(d["name"], index=d["index"], ctype=d["ctype"])
    if kind == "lit":
        return Literal(d["value"], d["ctype"])
    if kind == "cmp":
        return Comparison(d["op"], expr_from_json(d["left"]), expr_from_json(d["right"]))
    if kind == "and":
        return BoolAnd([expr_from_json(t) for t in d["terms"]])
    if kind == "arith":
        return Arith(d["op"], expr_from_json(d["left"]), expr_from_json(d["right"]))
    if kind == "agg":
        return AggCall(d["func"], expr_from_json(d["arg"]), d.get("ctype"))
    raise ValueError(f"unknown expression kind: {kind}")
