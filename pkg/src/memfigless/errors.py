"""Exception hierarchy shared across the package."""


class MemfiglessError(Exception):
    """Base class for all package errors."""


class SchemaError(MemfiglessError, ValueError):
    """A record or config violates a type invariant."""


class EmptyDataset(MemfiglessError):
    """No usable (successful) records were available."""


class DimensionMismatch(MemfiglessError, ValueError):
    pass


class MemoryOutOfRange(MemfiglessError, ValueError):
    pass


class EmptyGrid(MemfiglessError, ValueError):
    pass


class EmptySamples(MemfiglessError, ValueError):
    pass


class TooFewSamples(MemfiglessError, ValueError):
    pass


class DegenerateVariance(MemfiglessError, ValueError):
    """R² is undefined because the actual values have zero variance."""


class VersionMismatch(MemfiglessError):
    pass


class CorruptModel(MemfiglessError):
    pass


class ModelMissing(MemfiglessError):
    pass


class UnknownFunction(MemfiglessError, KeyError):
    pass
