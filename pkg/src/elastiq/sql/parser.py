"""Recursive-descent parser for the supported SQL subset.

Supported: single SELECT with a select list, FROM with INNER JOIN ... ON
equi-conditions, WHERE with comparison/AND predicates, GROUP BY, ORDER BY
and LIMIT.  Anything else in the SQL standard raises UnsupportedFeature;
malformed input raises SqlSyntaxError with the offending offset.
"""

from __future__ import annotations

import datetime
import re

from ..errors import SqlSyntaxError, UnsupportedFeature
from ..pages import DATE, FLOAT64, INT64, STRING
from .ast import (
    AGG_FUNCS,
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

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<date>\d{4}-\d{2}-\d{2})
  | (?P<number>\d+\.\d*|\.\d+|\d+)
  | (?P<string>'(?:[^']|'')*')
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op><=|>=|<>|!=|=|<|>)
  | (?P<punct>[(),.;*/+-])
    """,
    re.VERBOSE,
)

_UNSUPPORTED_KEYWORDS = {
    "LEFT", "RIGHT", "FULL", "OUTER", "CROSS", "UNION", "EXCEPT", "INTERSECT",
    "HAVING", "OVER", "DISTINCT", "CASE", "EXISTS", "IN", "BETWEEN", "LIKE",
    "OR", "NOT", "WITH", "INSERT", "UPDATE", "DELETE", "CREATE", "DROP",
}


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind
        self.text = text
        self.pos = pos

    @property
    def upper(self):
        return self.text.upper()


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise SqlSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


def _date_to_days(text):
    y, m, d = (int(x) for x in text.split("-"))
    return (datetime.date(y, m, d) - datetime.date(1970, 1, 1)).days


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    # -- token helpers -------------------------------------------------------

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_keyword(self, word):
        t = self.peek()
        return t.kind == "ident" and t.upper == word

    def accept_keyword(self, word):
        if self.at_keyword(word):
            self.advance()
            return True
        return False

    def expect_keyword(self, word):
        t = self.peek()
        if not self.accept_keyword(word):
            raise SqlSyntaxError(f"expected {word}, found {t.text!r}", t.pos)

    def accept_punct(self, ch):
        t = self.peek()
        if t.kind == "punct" and t.text == ch:
            self.advance()
            return True
        return False

    def expect_punct(self, ch):
        t = self.peek()
        if not self.accept_punct(ch):
            raise SqlSyntaxError(f"expected {ch!r}, found {t.text!r}", t.pos)

    def expect_ident(self):
        t = self.peek()
        if t.kind != "ident":
            raise SqlSyntaxError(f"expected identifier, found {t.text!r}", t.pos)
        if t.upper in _UNSUPPORTED_KEYWORDS:
            raise UnsupportedFeature(f"{t.upper} is not supported")
        return self.advance()

    # -- grammar -------------------------------------------------------------

    def parse_statement(self):
        self.expect_keyword("SELECT")
        items = [self.select_item()]
        while self.accept_punct(","):
            items.append(self.select_item())
        self.expect_keyword("FROM")
        plan = self.from_clause()
        if self.accept_keyword("WHERE"):
            plan = Filter(plan, self.predicate())
        group_keys = []
        if self.accept_keyword("GROUP"):
            self.expect_keyword("BY")
            group_keys.append(self.column_ref())
            while self.accept_punct(","):
                group_keys.append(self.column_ref())
        plan = self.apply_select(plan, items, group_keys)
        if self.accept_keyword("ORDER"):
            self.expect_keyword("BY")
            keys = [self.order_item(plan)]
            while self.accept_punct(","):
                keys.append(self.order_item(plan))
            plan = Sort(plan, keys)
        if self.accept_keyword("LIMIT"):
            t = self.peek()
            if t.kind != "number" or "." in t.text:
                raise SqlSyntaxError("LIMIT expects an integer", t.pos)
            plan = Limit(plan, int(self.advance().text))
        self.accept_punct(";")
        t = self.peek()
        if t.kind != "eof":
            if t.kind == "ident" and t.upper in _UNSUPPORTED_KEYWORDS:
                raise UnsupportedFeature(f"{t.upper} is not supported")
            raise SqlSyntaxError(f"unexpected trailing input {t.text!r}", t.pos)
        return plan

    def select_item(self):
        expr = self.expr()
        name = None
        if self.accept_keyword("AS"):
            name = self.expect_ident().text.lower()
        elif self.peek().kind == "ident" and self.peek().upper not in (
            "FROM", "WHERE", "GROUP", "ORDER", "LIMIT", "AS", "INNER", "JOIN", "ON",
        ) and self.peek().upper not in _UNSUPPORTED_KEYWORDS:
            name = self.advance().text.lower()
        return expr, name

    def from_clause(self):
        if self.peek().kind == "punct" and self.peek().text == "(":
            raise UnsupportedFeature("subqueries are not supported")
        plan = Scan(self.expect_ident().text.lower())
        while True:
            t = self.peek()
            if t.kind == "ident" and t.upper in ("LEFT", "RIGHT", "FULL", "CROSS", "OUTER"):
                raise UnsupportedFeature(f"{t.upper} JOIN is not supported")
            if self.accept_keyword("INNER"):
                self.expect_keyword("JOIN")
            elif not self.accept_keyword("JOIN"):
                break
            if self.peek().kind == "punct" and self.peek().text == "(":
                raise UnsupportedFeature("subqueries are not supported")
            right = Scan(self.expect_ident().text.lower())
            self.expect_keyword("ON")
            lkeys, rkeys = [], []
            while True:
                a = self.column_ref()
                t = self.peek()
                if not (t.kind == "op" and t.text == "="):
                    raise SqlSyntaxError("JOIN conditions must be equi-conditions", t.pos)
                self.advance()
                b = self.column_ref()
                lkeys.append(a)
                rkeys.append(b)
                if not self.accept_keyword("AND"):
                    break
            plan = Join(plan, right, lkeys, rkeys)
        return plan

    def apply_select(self, plan, items, group_keys):
        has_agg = any(isinstance(e, AggCall) for e, _ in items)
        if not has_agg and not group_keys:
            exprs = [e for e, _ in items]
            names = [n if n else render_expr(e) for e, n in items]
            return Project(plan, exprs, names)
        # aggregation: the Aggregate node outputs [group keys..., aggregates...]
        # with generated names, then a Project restores the select-list order.
        aggs, agg_names = [], []
        out_exprs, out_names = [], []
        for e, n in items:
            if isinstance(e, AggCall):
                gen = render_expr(e)
                if gen not in agg_names:
                    aggs.append(e)
                    agg_names.append(gen)
                out_exprs.append(ColumnRef(gen))
            elif isinstance(e, ColumnRef):
                if not any(g.name == e.name and g.table == e.table for g in group_keys):
                    raise SqlSyntaxError(
                        f"column {e.display()} must appear in GROUP BY", 0
                    )
                out_exprs.append(ColumnRef(e.name, e.table))
            else:
                raise UnsupportedFeature(
                    "select items with aggregation must be group keys or aggregate calls"
                )
            out_names.append(n if n else render_expr(e))
        agg = Aggregate(
            plan,
            group_keys,
            aggs,
            [render_expr(g) for g in group_keys] + agg_names,
        )
        return Project(agg, out_exprs, out_names)

    def order_item(self, plan):
        ref = self.column_ref()
        asc = True
        if self.accept_keyword("DESC"):
            asc = False
        else:
            self.accept_keyword("ASC")
        return ref, asc

    # -- expressions ---------------------------------------------------------

    def predicate(self):
        terms = [self.comparison()]
        while self.accept_keyword("AND"):
            terms.append(self.comparison())
        return terms[0] if len(terms) == 1 else BoolAnd(terms)

    def comparison(self):
        left = self.expr()
        t = self.peek()
        if t.kind == "ident" and t.upper in _UNSUPPORTED_KEYWORDS:
            raise UnsupportedFeature(f"{t.upper} is not supported")
        if t.kind != "op":
            raise SqlSyntaxError(f"expected comparison operator, found {t.text!r}", t.pos)
        op = self.advance().text
        if op == "!=":
            op = "<>"
        right = self.expr()
        return Comparison(op, left, right)

    def expr(self):
        node = self.term()
        while True:
            t = self.peek()
            if t.kind == "punct" and t.text in "+-":
                self.advance()
                node = Arith(t.text, node, self.term())
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            t = self.peek()
            if t.kind == "punct" and t.text in "*/":
                self.advance()
                node = Arith(t.text, node, self.factor())
            else:
                return node

    def factor(self):
        t = self.peek()
        if t.kind == "date":
            self.advance()
            return Literal(_date_to_days(t.text), DATE)
        if t.kind == "number":
            self.advance()
            if "." in t.text:
                return Literal(float(t.text), FLOAT64)
            return Literal(int(t.text), INT64)
        if t.kind == "string":
            self.advance()
            return Literal(t.text[1:-1].replace("''", "'"), STRING)
        if t.kind == "punct" and t.text == "(":
            self.advance()
            if self.at_keyword("SELECT"):
                raise UnsupportedFeature("subqueries are not supported")
            node = self.expr()
            self.expect_punct(")")
            return node
        if t.kind == "ident":
            if t.upper == "DATE":
                self.advance()
                s = self.peek()
                if s.kind != "string":
                    raise SqlSyntaxError("DATE expects a quoted literal", s.pos)
                self.advance()
                try:
                    return Literal(_date_to_days(s.text[1:-1]), DATE)
                except ValueError as exc:
                    raise SqlSyntaxError(f"bad date literal: {exc}", s.pos) from exc
            if t.text.lower() in AGG_FUNCS and self.tokens[self.i + 1].text == "(":
                func = self.advance().text.lower()
                self.expect_punct("(")
                if self.peek().text == "*":
                    raise UnsupportedFeature("count(*) is not supported; count a column")
                arg = self.expr()
                if isinstance(arg, AggCall):
                    raise UnsupportedFeature("nested aggregates are not supported")
                self.expect_punct(")")
                return AggCall(func, arg)
            return self.column_ref()
        raise SqlSyntaxError(f"unexpected token {t.text!r}", t.pos)

    def column_ref(self):
        first = self.expect_ident()
        if self.accept_punct("."):
            col = self.expect_ident()
            return ColumnRef(col.text.lower(), first.text.lower())
        return ColumnRef(first.text.lower())


def render_expr(e):
    """Canonical text of an expression; also the generated column name."""
    if isinstance(e, ColumnRef):
        return e.display()
    if isinstance(e, Literal):
        if e.ctype == DATE:
            d = datetime.date(1970, 1, 1) + datetime.timedelta(days=e.value)
            return d.isoformat()
        if e.ctype == STRING:
            return "'" + str(e.value).replace("'", "''") + "'"
        return repr(e.value)
    if isinstance(e, Arith):
        return f"({render_expr(e.left)} {e.op} {render_expr(e.right)})"
    if isinstance(e, AggCall):
        return f"{e.func}({render_expr(e.arg)})"
    if isinstance(e, Comparison):
        return f"{render_expr(e.left)} {e.op} {render_expr(e.right)}"
    if isinstance(e, BoolAnd):
        return " AND ".join(render_expr(t) for t in e.terms)
    raise TypeError(f"not an expression: {e!r}")


def parse(text):
    """Parse one SELECT statement into an unbound logical plan."""
    if not text or not text.strip():
        raise SqlSyntaxError("empty statement", 0)
    return _Parser(text).parse_statement()
