"""Catalog: table schemas plus the system splits that hold their data.

Loaded from a single JSON configuration file shared by the coordinator and
the workers, e.g.::

    {"tables": {"orders": {
        "columns": [["o_orderkey", "int64"], ["o_orderdate", "date"]],
        "splits": [{"path": "orders.csv", "start": 0, "end": 1048576}]}}}

Split byte ranges are newline-aligned (the split generator pre-scans for
record boundaries) so CSV records never straddle a split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import UnknownTable
from .pages import COLUMN_TYPES


@dataclass(frozen=True)
class SystemSplit:
    """Byte range of a CSV file; tells a scan task where to read."""

    path: str
    start: int
    end: int
    fmt: str = "csv"

    def to_json(self):
        return {"path": self.path, "start": self.start, "end": self.end, "fmt": self.fmt}

    @staticmethod
    def from_json(d):
        return SystemSplit(d["path"], d["start"], d["end"], d.get("fmt", "csv"))


@dataclass
class TableDef:
    name: str
    columns: list  # [(column-name, column-type)]
    splits: list = field(default_factory=list)

    def __post_init__(self):
        names = [c for c, _ in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in table {self.name}")
        for _, t in self.columns:
            if t not in COLUMN_TYPES:
                raise ValueError(f"unknown column type {t!r} in table {self.name}")
        if not self.splits:
            raise ValueError(f"table {self.name} has no splits")

    def column_index(self, name):
        for i, (c, _) in enumerate(self.columns):
            if c == name:
                return i
        return None

    def column_type(self, name):
        i = self.column_index(name)
        return None if i is None else self.columns[i][1]

    def total_bytes(self):
        return sum(s.end - s.start for s in self.splits)


@dataclass
class Catalog:
    tables: dict

    def table(self, name):
        t = self.tables.get(name.lower())
        if t is None:
            raise UnknownTable(f"unknown table: {name}")
        return t

    def has_table(self, name):
        return name.lower() in self.tables

    @staticmethod
    def load(path):
        with open(path) as f:
            doc = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        tables = {}
        for name, spec in doc["tables"].items():
            splits = [
                SystemSplit(
                    p["path"] if os.path.isabs(p["path"]) else os.path.join(base, p["path"]),
                    p["start"],
                    p["end"],
                    p.get("fmt", "csv"),
                )
                for p in spec["splits"]
            ]
            tables[name.lower()] = TableDef(
                name.lower(), [tuple(c) for c in spec["columns"]], splits
            )
        return Catalog(tables)


def generate_splits(path, splits_per_file):
    """Divide a CSV file into newline-aligned byte-range splits."""
    size = os.path.getsize(path)
    if size == 0:
        return [SystemSplit(path, 0, 0)]
    bounds = [0]
    with open(path, "rb") as f:
        for k in range(1, splits_per_file):
            target = size * k // splits_per_file
            if target <= bounds[-1]:
                continue
            f.seek(target)
            f.readline()  # advance to the next record boundary
            pos = f.tell()
            if pos < size and pos > bounds[-1]:
                bounds.append(pos)
    bounds.append(size)
    return [SystemSplit(path, a, b) for a, b in zip(bounds, bounds[1:]) if b > a]
