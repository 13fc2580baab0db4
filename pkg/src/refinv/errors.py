"""Exception hierarchy shared across the package."""


class RefinvError(Exception):
    """Base class for all package errors."""


class ConfigError(RefinvError):
    """Invalid configuration, schedule, or spec field."""


class ShapeError(RefinvError):
    """Array shape or sequence-length mismatch."""


class EvalError(RefinvError):
    """Non-finite or otherwise invalid value produced during evaluation."""


class TrainingError(RefinvError):
    """Toy-model training diverged or missed its accuracy floor."""


class DatasetError(RefinvError):
    """Dataset generation could not satisfy its constraints."""


class VocabError(RefinvError):
    """Unknown attribute id or malformed token sequence."""


class TheoryError(RefinvError):
    """Theory-lab probe violated a precondition (domain or convexity)."""
