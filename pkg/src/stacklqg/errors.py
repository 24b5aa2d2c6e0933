"""Exception hierarchy shared by every stage of the solver."""


class StackLQGError(Exception):
    """Base class for all solver errors."""


class ScenarioParseError(StackLQGError):
    """A scenario document is malformed or violates the schema."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DimensionError(StackLQGError, ValueError):
    """Two matrices have incompatible shapes."""

    def __init__(self, name, shape, expected, against=None):
        self.name = name
        self.shape = tuple(shape)
        self.expected = tuple(expected)
        ref = f" (implied by {against})" if against else ""
        super().__init__(f"{name} has shape {self.shape}, expected {self.expected}{ref}")


class ParameterError(StackLQGError, ValueError):
    """A scalar model parameter is outside its admissible range."""


class InversionError(StackLQGError):
    """A weight matrix could not be inverted reliably."""


class GridError(StackLQGError):
    """Time grids disagree or a node index is out of range."""


class DivergenceError(StackLQGError):
    """A numerical flow produced non-finite values."""

    def __init__(self, message, node=None, time=None):
        self.node = node
        self.time = time
        super().__init__(message)


class FixedPointError(StackLQGError):
    """The coupled forward-backward iteration failed to converge."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class NotConvergedError(StackLQGError):
    """An operation was handed a Riccati bundle that did not converge."""


class SimulationError(StackLQGError):
    """One or more Monte Carlo paths diverged."""

    def __init__(self, message, failed_paths=()):
        self.failed_paths = list(failed_paths)
        super().__init__(message)
