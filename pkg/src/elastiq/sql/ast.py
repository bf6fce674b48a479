"""Logical plan nodes and symbolic expressions.

Expressions stay symbolic through parsing; binding annotates every column
reference with its source table, column index into the node's input row
schema, and type.  Nodes compare structurally (dataclass equality), which
the round-trip and idempotence properties rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

AGG_FUNCS = ("count", "sum", "min", "max", "avg")


# -- expressions -------------------------------------------------------------

@dataclass
class ColumnRef:
    name: str
    table: Optional[str] = None
    # filled in by the binder:
    index: Optional[int] = None
    ctype: Optional[str] = None

    @property
    def bound(self):
        return self.index is not None

    def display(self):
        return f"{self.table}.{self.name}" if self.table else self.name


@dataclass
class Literal:
    value: object
    ctype: str


@dataclass
class Comparison:
    op: str  # < <= > >= = <>
    left: object
    right: object


@dataclass
class BoolAnd:
    terms: list


@dataclass
class Arith:
    op: str  # + - * /
    left: object
    right: object


@dataclass
class AggCall:
    func: str  # one of AGG_FUNCS
    arg: object  # expression; count(*) not supported, count(col) is
    ctype: Optional[str] = None  # output type, set by the binder


# -- logical plan nodes ------------------------------------------------------

@dataclass
class Scan:
    table: str
    # set by the binder:
    schema: Optional[list] = None  # [(name, type)]

    children = ()


@dataclass
class Filter:
    child: object
    predicate: object
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.child,)


@dataclass
class Project:
    child: object
    exprs: list
    names: list
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.child,)


@dataclass
class Join:
    left: object
    right: object
    left_keys: list  # [ColumnRef] into left output
    right_keys: list  # [ColumnRef] into right output
    kind: str = "inner"
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.left, self.right)


@dataclass
class Aggregate:
    child: object
    group_keys: list  # [ColumnRef]
    aggs: list  # [AggCall]
    names: list  # output column names, group keys first
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.child,)


@dataclass
class Sort:
    child: object
    keys: list  # [(ColumnRef into child output, ascending: bool)]
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.child,)


@dataclass
class Limit:
    child: object
    n: int
    schema: Optional[list] = None

    @property
    def children(self):
        return (self.child,)


def walk(node):
    yield node
    for c in node.children:
        yield from walk(c)
