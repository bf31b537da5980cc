"""Exception hierarchy shared by every module of the package."""


class OCPWError(Exception):
    """Base class for all package errors."""


class InvalidInput(OCPWError, ValueError):
    """An argument violates a documented precondition."""


class UnsupportedValue(InvalidInput):
    """The data holds values the codec refuses to handle (NaN, Inf)."""


class DecodeError(OCPWError):
    """A payload, metadata block or container failed to decode."""


class TooFewSamples(InvalidInput):
    """A calibration routine received too few usable measurements."""


class IncompleteGather(OCPWError):
    """A gathered estimate table is missing a (rank, field) entry."""


class ConsistencyFault(OCPWError):
    """Ranks disagree on state that must be identical everywhere."""


class TooLargeInstance(InvalidInput):
    """An exhaustive routine was asked to search an oversized space."""
