"""Render a logical plan back to SQL text.

Only plans with the canonical shape produced by ``parse`` are supported;
``parse(render(parse(q)))`` is structurally identical to ``parse(q)``.
"""

from __future__ import annotations

from .ast import Aggregate, ColumnRef, Filter, Join, Limit, Project, Scan, Sort
from .parser import render_expr


def _render_from(node):
    if isinstance(node, Scan):
        return node.table
    if isinstance(node, Join):
        conds = " AND ".join(
            f"{a.display()} = {b.display()}"
            for a, b in zip(node.left_keys, node.right_keys)
        )
        return f"{_render_from(node.left)} INNER JOIN {_render_from(node.right)} ON {conds}"
    raise TypeError(f"unexpected node in FROM position: {type(node).__name__}")


def render(plan):
    limit = None
    if isinstance(plan, Limit):
        limit = plan.n
        plan = plan.child
    order = None
    if isinstance(plan, Sort):
        order = ", ".join(
            ref.display() + ("" if asc else " DESC") for ref, asc in plan.keys
        )
        plan = plan.child
    if not isinstance(plan, Project):
        raise TypeError("expected a Project at the top of the plan")
    project = plan
    plan = plan.child

    group = None
    if isinstance(plan, Aggregate):
        agg = plan
        if agg.group_keys:
            group = ", ".join(g.display() for g in agg.group_keys)
        # select items reference aggregate outputs; recover the original
        # expression text from the aggregate node
        agg_by_name = dict(zip(agg.names[len(agg.group_keys):], agg.aggs))
        items = []
        for expr, name in zip(project.exprs, project.names):
            source = expr
            if isinstance(expr, ColumnRef):
                for g in agg.group_keys:
                    if g.name == expr.name and g.table == expr.table:
                        source = g
                        break
                else:
                    source = agg_by_name.get(expr.name, expr)
            text = render_expr(source)
            items.append(text if name == text else f"{text} AS {name}")
        plan = agg.child
    else:
        items = []
        for expr, name in zip(project.exprs, project.names):
            text = render_expr(expr)
            items.append(text if name == text else f"{text} AS {name}")

    where = None
    if isinstance(plan, Filter):
        where = render_expr(plan.predicate)
        plan = plan.child

    sql = f"SELECT {', '.join(items)} FROM {_render_from(plan)}"
    if where:
        sql += f" WHERE {where}"
    if group:
        sql += f" GROUP BY {group}"
    if order:
        sql += f" ORDER BY {order}"
    if limit is not None:
        sql += f" LIMIT {limit}"
    return sql
