class NavError(Exception):
    """Base class of every error raised by this package"""


class ConfigError(NavError, ValueError):
    pass


class DomainError(NavError, ValueError):
    pass


class UsageError(NavError, RuntimeError):
    pass


class EstimationError(NavError, ArithmeticError):
    pass


class TrainingError(NavError, ArithmeticError):
    def __init__(self, message, trajectory_id=None, timestep=None):
        super().__init__(message)
        self.trajectory_id = trajectory_id
        self.timestep = timestep


class DataError(NavError, ValueError):
    def __init__(self, message, demo_index=None):
        super().__init__(message)
        self.demo_index = demo_index


class CollectionError(NavError, RuntimeError):
    def __init__(self, message, ticket_id=None):
        super().__init__(message)
        self.ticket_id = ticket_id
