"""Exception hierarchy shared by every module."""


class CollabError(Exception):
    """Base class for errors raised by collabdiff."""


class ArgumentError(CollabError, ValueError):
    """An argument is outside its documented domain."""


class ContractViolation(CollabError, ValueError):
    """Inputs violate a layer's shape or content contract."""


class ConfigurationError(CollabError, ValueError):
    """A model or experiment configuration is invalid."""


class UsageError(CollabError, RuntimeError):
    """Objects were wired together incorrectly (e.g. mismatched modalities)."""


class StateError(CollabError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class DivergenceError(CollabError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class InvariantViolation(CollabError, AssertionError):
    """A guaranteed invariant was broken (e.g. a frozen model changed)."""
