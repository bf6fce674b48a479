from .ast import (  # noqa: F401
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
from .parser import parse  # noqa: F401
from .binder import bind  # noqa: F401
from .render import render  # noqa: F401
