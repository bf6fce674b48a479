import pytest

from elastiq.catalog import Catalog, SystemSplit, TableDef
from elastiq.datagen import generate


def _table(name, columns):
    return TableDef(name, columns, [SystemSplit(f"/data/{name}.csv", 0, 1024)])


@pytest.fixture
def catalog():
    """Schema-only catalog (splits are placeholders) for frontend/planner tests."""
    tables = {
        "lineitem": _table(
            "lineitem",
            [
                ("l_orderkey", "int64"),
                ("l_partkey", "int64"),
                ("l_quantity", "float64"),
                ("l_extendedprice", "float64"),
                ("l_discount", "float64"),
                ("l_shipdate", "date"),
            ],
        ),
        "orders": _table(
            "orders",
            [
                ("o_orderkey", "int64"),
                ("o_custkey", "int64"),
                ("o_orderdate", "date"),
                ("o_totalprice", "float64"),
            ],
        ),
        "customer": _table(
            "customer",
            [
                ("c_custkey", "int64"),
                ("c_name", "string"),
                ("c_nationkey", "int64"),
                ("c_acctbal", "float64"),
            ],
        ),
        "t": _table("t", [("x", "int64")]),
        "nums": _table(
            "nums",
            [("k", "int64"), ("v", "int64"), ("f", "float64"), ("s", "string")],
        ),
    }
    return Catalog(tables)


@pytest.fixture(scope="session")
def data_catalog(tmp_path_factory):
    """Small deterministic dataset on disk (shared across the session)."""
    out = tmp_path_factory.mktemp("data")
    path = generate(str(out), scale=0.002, seed=7, splits=4)
    return Catalog.load(path)


Q3_STYLE = (
    "SELECT l_orderkey FROM lineitem "
    "INNER JOIN orders ON l_orderkey = o_orderkey "
    "INNER JOIN customer ON c_custkey = o_custkey "
    "WHERE o_orderdate < 1994-03-05"
)

TWO_WAY_JOIN = (
    "SELECT count(l_orderkey) FROM lineitem "
    "INNER JOIN orders ON lineitem.l_orderkey = orders.o_orderkey"
)
