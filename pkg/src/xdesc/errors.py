"""Exception hierarchy shared by every xdesc module."""


class XdescError(Exception):
    """Base class for all library errors."""


class NormalizationError(XdescError, ValueError):
    pass


class ShapeError(XdescError, ValueError):
    pass


class DomainError(XdescError, ValueError):
    pass


class ConfigError(XdescError, ValueError):
    pass


class SpecError(XdescError, ValueError):
    pass


class DatasetError(XdescError, ValueError):
    pass


class FormatError(XdescError, ValueError):
    """Malformed XDSC / XMLP / XBNK / JSON input."""


class BatchTooSmall(XdescError, ValueError):
    pass


class NumericsError(XdescError, ArithmeticError):
    pass


class StaleCache(XdescError, RuntimeError):
    pass


class MatchError(XdescError, ValueError):
    pass


class StatsError(XdescError, ValueError):
    pass
