"""Deterministic benchmark data generator.

Generates a small order-processing dataset (customer / orders / lineitem,
the column subset the engine's demos and tests use) as CSV files plus a
catalog JSON with newline-aligned splits.  The same seed and scale always
produce byte-identical data.  Scale 1.0 roughly follows the classic
warehouse benchmark row counts; desk-scale runs use 0.01 - 0.1.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import random

from .catalog import generate_splits

_EPOCH = datetime.date(1970, 1, 1)
_DATE_LO = (datetime.date(1992, 1, 1) - _EPOCH).days
_DATE_HI = (datetime.date(1998, 8, 2) - _EPOCH).days

TABLES = {
    "customer": [
        ["c_custkey", "int64"],
        ["c_name", "string"],
        ["c_nationkey", "int64"],
        ["c_acctbal", "float64"],
    ],
    "orders": [
        ["o_orderkey", "int64"],
        ["o_custkey", "int64"],
        ["o_orderdate", "date"],
        ["o_totalprice", "float64"],
    ],
    "lineitem": [
        ["l_orderkey", "int64"],
        ["l_partkey", "int64"],
        ["l_quantity", "float64"],
        ["l_extendedprice", "float64"],
        ["l_discount", "float64"],
        ["l_shipdate", "date"],
    ],
}


def _iso(days):
    return (_EPOCH + datetime.timedelta(days=days)).isoformat()


def generate(output_dir, scale=0.01, seed=1, splits=4, null_rate=0.01):
    """Write the dataset and return the catalog config path."""
    rng = random.Random(seed)
    os.makedirs(output_dir, exist_ok=True)
    n_customer = max(1, int(150_000 * scale))
    n_orders = max(1, int(1_500_000 * scale))
    n_part = max(1, int(200_000 * scale))

    def maybe_null(text):
        return "" if rng.random() < null_rate else text

    with open(os.path.join(output_dir, "customer.csv"), "w") as f:
        for ck in range(1, n_customer + 1):
            f.write("%d,Customer#%09d,%d,%s\n" % (
                ck, ck, rng.randrange(25),
                maybe_null("%.2f" % rng.uniform(-999.99, 9999.99)),
            ))

    order_dates = {}
    with open(os.path.join(output_dir, "orders.csv"), "w") as f:
        for ok in range(1, n_orders + 1):
            date = rng.randrange(_DATE_LO, _DATE_HI - 121)
            order_dates[ok] = date
            f.write("%d,%d,%s,%.2f\n" % (
                ok, rng.randrange(1, n_customer + 1), _iso(date),
                rng.uniform(900.0, 500_000.0),
            ))

    with open(os.path.join(output_dir, "lineitem.csv"), "w") as f:
        for ok in range(1, n_orders + 1):
            for _ in range(rng.randrange(1, 8)):
                qty = float(rng.randrange(1, 51))
                price = round(qty * rng.uniform(900.0, 2000.0), 2)
                f.write("%d,%d,%.1f,%.2f,%s,%s\n" % (
                    ok, rng.randrange(1, n_part + 1), qty, price,
                    maybe_null("%.2f" % (rng.randrange(0, 11) / 100.0)),
                    _iso(order_dates[ok] + rng.randrange(1, 122)),
                ))

    config = {"tables": {}}
    for name, columns in TABLES.items():
        path = os.path.join(output_dir, f"{name}.csv")
        config["tables"][name] = {
            "columns": columns,
            "splits": [
                {"path": os.path.basename(s.path),
                 "start": s.start, "end": s.end}
                for s in generate_splits(path, splits)
            ],
        }
    catalog_path = os.path.join(output_dir, "catalog.json")
    with open(catalog_path, "w") as f:
        json.dump(config, f, indent=2)
    return catalog_path


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="generate deterministic benchmark data"
    )
    parser.add_argument("--output", required=True)
    parser.add_argument("--scale", type=float, default=0.01)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--splits", type=int, default=4,
                        help="splits per table file")
    parser.add_argument("--null-rate", type=float, default=0.01)
    args = parser.parse_args(argv)
    path = generate(args.output, args.scale, args.seed, args.splits,
                    args.null_rate)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
