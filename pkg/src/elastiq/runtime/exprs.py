"""Vectorized evaluation of bound expressions over pages.

evaluate() returns a (values, valid) pair: values is a numpy array for
numeric results (bool for comparisons) or a list of str, valid is a bool
mask where False marks SQL NULL.  Predicates use three-valued logic; a
row passes a filter only when the predicate is definitely true.
"""

from __future__ import annotations

import numpy as np

from ..errors import ExecutionError
from ..pages import FLOAT64, STRING
from ..sql.ast import Arith, BoolAnd, ColumnRef, Comparison, Literal

_CMP = {
    "=": np.equal,
    "<>": np.not_equal,
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
}


def evaluate(expr, page):
    n = page.row_count
    if isinstance(expr, ColumnRef):
        return page.columns[expr.index], page.valid[expr.index]
    if isinstance(expr, Literal):
        if expr.ctype == STRING:
            return [expr.value] * n, np.ones(n, dtype=bool)
        dtype = np.float64 if expr.ctype == FLOAT64 else np.int64
        return np.full(n, expr.value, dtype=dtype), np.ones(n, dtype=bool)
    if isinstance(expr, Comparison):
        return _compare(expr, page)
    if isinstance(expr, BoolAnd):
        vals, valid = evaluate(expr.terms[0], page)
        for t in expr.terms[1:]:
            v2, m2 = evaluate(t, page)
            # false AND anything = false; unknown otherwise propagates
            definitely_false = (~vals & valid) | (~v2 & m2)
            vals = vals & v2
            valid = (valid & m2) | definitely_false
        return vals, valid
    if isinstance(expr, Arith):
        return _arith(expr, page)
    raise ExecutionError(f"cannot evaluate {type(expr).__name__}")


def _compare(expr, page):
    lv, lm = evaluate(expr.left, page)
    rv, rm = evaluate(expr.right, page)
    valid = lm & rm
    if isinstance(lv, list) or isinstance(rv, list):
        l = lv if isinstance(lv, list) else list(lv)
        r = rv if isinstance(rv, list) else list(rv)
        fn = _CMP[expr.op]
        vals = np.array([bool(fn(a, b)) for a, b in zip(l, r)], dtype=bool)
    else:
        vals = _CMP[expr.op](lv, rv)
    return vals, valid


def _arith(expr, page):
    lv, lm = evaluate(expr.left, page)
    rv, rm = evaluate(expr.right, page)
    valid = lm & rm
    if expr.op == "+":
        vals = lv + rv
    elif expr.op == "-":
        vals = lv - rv
    elif expr.op == "*":
        vals = lv * rv
    elif expr.op == "/":
        denom = np.asarray(rv, dtype=np.float64)
        zero = denom == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.asarray(lv, dtype=np.float64) / np.where(zero, 1.0, denom)
        valid = valid & ~zero  # division by zero yields NULL
    else:
        raise ExecutionError(f"unknown arithmetic op {expr.op!r}")
    return vals, valid


def predicate_mask(expr, page):
    """Rows where the predicate is definitely true (not false, not NULL)."""
    vals, valid = evaluate(expr, page)
    return np.asarray(vals, dtype=bool) & valid
