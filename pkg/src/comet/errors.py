"""Exception hierarchy shared by all comet modules."""


class CometError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CometError):
    """Malformed or truncated binary file."""


class DataError(CometError):
    """Values violate a data invariant (NaN, empty set, dimension mismatch, ...)."""


class SchemaError(CometError):
    """Column spec or run config does not match the data."""


class TreeError(CometError):
    """Invalid label tree (cycle, multiple roots, broken leaf-class bijection)."""


class SplitError(CometError):
    """Dataset cannot be split as requested."""


class SingularError(CometError):
    """Unregularized linear system is singular."""


class SpecError(CometError):
    """Fusion spec references modalities the dataset does not have."""


class PredictorError(CometError):
    """The prediction backend failed."""
