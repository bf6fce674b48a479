"""elastiq: a miniature distributed OLAP engine with intra-query runtime
elasticity -- per-stage and per-task parallelism of a running query can be
changed at any moment without pausing data processing."""

__version__ = "0.1.0"
