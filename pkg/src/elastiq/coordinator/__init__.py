from .execution import QueryExecution, StageExecution, TaskHandle  # noqa: F401
from .collector import Collector, collect_query  # noqa: F401
from .workers import HttpWorker, LocalWorker, WorkerPool  # noqa: F401
from .service import Coordinator, CoordinatorServer, local_cluster  # noqa: F401
