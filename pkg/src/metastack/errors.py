"""Exception types shared across the package."""


class DataError(Exception):
    """Raised for malformed inputs: bad CSV, invalid markers, infeasible specs."""


class ExperimentError(Exception):
    """Raised when an experiment cannot proceed (e.g. a single-class outer fold)."""
