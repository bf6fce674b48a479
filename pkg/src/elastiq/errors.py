"""Exception types shared across the engine."""


class ElastiqError(Exception):
    """Base class for engine errors."""


# -- SQL frontend ------------------------------------------------------------

class SqlSyntaxError(ElastiqError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at offset {position})")
        self.position = position


class UnsupportedFeature(ElastiqError):
    pass


class UnknownTable(ElastiqError):
    pass


class UnknownColumn(ElastiqError):
    pass


class TypeMismatch(ElastiqError):
    pass


# -- planning ----------------------------------------------------------------

class InvalidTarget(ElastiqError):
    pass


# -- page runtime ------------------------------------------------------------

class CorruptPage(ElastiqError):
    pass


class ExecutionError(ElastiqError):
    pass


# -- buffers -----------------------------------------------------------------

class EnqueueAfterEnd(ElastiqError):
    pass


class UnknownBufferId(ElastiqError):
    pass


class CacheDisabled(ElastiqError):
    pass


# -- worker ------------------------------------------------------------------

class WorkerOverloaded(ElastiqError):
    pass


class InvalidSpec(ElastiqError):
    pass


class PipelineFixed(ElastiqError):
    pass


class TaskFinished(ElastiqError):
    pass


# -- coordinator -------------------------------------------------------------

class NoWorkers(ElastiqError):
    pass


class StageFixed(ElastiqError):
    pass


class QueryFinished(ElastiqError):
    pass


class LastTask(ElastiqError):
    pass


class UnknownQuery(ElastiqError):
    pass


# -- autotuner ---------------------------------------------------------------

class FilterRejected(ElastiqError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


class StaleData(ElastiqError):
    pass


class NoProgressSignal(ElastiqError):
    pass


class Infeasible(ElastiqError):
    pass
