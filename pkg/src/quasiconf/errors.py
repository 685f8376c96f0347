"""Exception hierarchy shared by all stages."""


class QuasiconfError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit."""


class FormatError(QuasiconfError, ValueError):
    pass


class EstimationError(QuasiconfError):
    pass


class GrayPointError(QuasiconfError):
    pass


class DegenerateIlluminantError(QuasiconfError):
    pass


class ScheduleError(QuasiconfError):
    pass


class ConfigError(QuasiconfError, ValueError):
    pass


class ShapeError(QuasiconfError, ValueError):
    pass


class SpecError(QuasiconfError, ValueError):
    pass
