"""Exception types shared across the package."""


class FlowcertError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FlowcertError):
    """Operands live on different grids or have inconsistent dimensions."""


class MassError(FlowcertError):
    """Pixel masses violate the probability-distribution constraints."""


class DataParseError(FlowcertError):
    """A dataset or grid file could not be parsed; message carries the offset."""


class ModelFormatError(FlowcertError):
    """A model file is malformed or has an unsupported version."""


class LpInputError(FlowcertError):
    """A linear program is dimensionally inconsistent or contains non-finite data."""


class SolverStallError(FlowcertError):
    """The LP solver hit its iteration cap or could not certify its answer."""
