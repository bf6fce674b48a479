from .task import RemoteSplit, Task, TaskId  # noqa: F401
from .service import LocalTransport, TaskManager, WorkerServer  # noqa: F401
