"""Exception hierarchy. Each family maps to a CLI exit code."""


class McPanelError(Exception):
    exit_code = 1


class ConfigError(McPanelError):
    exit_code = 2


class DataError(McPanelError):
    exit_code = 3


class UnbalancedPanelError(DataError):
    pass


class PanelParseError(DataError):
    pass


class InvalidAdoptionError(DataError):
    pass


class EmptyPanelError(DataError):
    pass


class InestimableError(DataError):
    """A requested effect or fixed effect has no data to identify it."""


class EmptySplitError(InestimableError):
    pass


class EmptyAggregateError(DataError):
    pass


class NumericalError(McPanelError):
    exit_code = 4


class RankDeficiencyError(NumericalError):
    """A row or column of the working matrix has no observed cell."""


class DegenerateFitError(NumericalError):
    pass
