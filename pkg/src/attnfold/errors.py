"""Exception types shared across the toolkit."""


class AttnFoldError(Exception):
    """Base class for every error raised by attnfold."""


class ConfigError(AttnFoldError, ValueError):
    pass


class InvalidGranularityError(ConfigError):
    pass


class GraphError(AttnFoldError, ValueError):
    """A graph document or graph rewrite is invalid.

    ``element`` names the offending node or tensor id when one is known.
    """

    def __init__(self, reason: str, element: str | None = None):
        self.reason = reason
        self.element = element
        where = f"[{element}] " if element is not None else ""
        super().__init__(f"{where}{reason}")


class SchemaError(GraphError):
    pass


class UnknownTensorError(GraphError):
    pass


class CycleError(GraphError):
    pass


class ShapeError(GraphError):
    pass


class HeadGroupingError(AttnFoldError, ValueError):
    pass


class InconsistentPlanError(AttnFoldError, ValueError):
    pass


class UnpaddedShapeError(AttnFoldError, ValueError):
    pass


class NotApplicableError(AttnFoldError, ValueError):
    pass


class DimensionError(AttnFoldError, ValueError):
    pass


class MustPadFirstError(DimensionError):
    pass


class UnpaddableError(AttnFoldError, ValueError):
    pass


class SimulationError(AttnFoldError, ValueError):
    pass
