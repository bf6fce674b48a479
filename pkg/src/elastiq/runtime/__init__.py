from .driver import Driver  # noqa: F401
from .local_exchange import HashTableHandle, LocalExchange  # noqa: F401
from .operators import operator_step  # noqa: F401
from .scheduler import DriverScheduler  # noqa: F401
