from .physical import (  # noqa: F401
    ExchangeNode,
    FinalAgg,
    HashJoin,
    LocalExchangeNode,
    OutputNode,
    PartialAgg,
    PFilter,
    PLimit,
    PProject,
    PSort,
    TableScan,
    to_physical,
)
from .fragments import (  # noqa: F401
    ExchangeSource,
    Fragment,
    StageTree,
    fragment,
    insert_shuffle_stage,
    reassemble,
)
from .pipelines import PipelineSpec, build_pipelines  # noqa: F401
