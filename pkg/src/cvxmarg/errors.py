"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument is out of range or inconsistent with the model."""


class DomainError(ValueError):
    """A belief vector left the open domain b > 0."""


class NumericalFailure(RuntimeError):
    """A factorization or linear solve broke down."""


class SingularHessian(NumericalFailure):
    """The diagonal belief Hessian has a nonpositive entry."""


class InvalidState(RuntimeError):
    """An operation was asked to use a result it cannot trust."""


class ParseError(ValueError):
    """Malformed input file; the message carries a byte offset or line number."""


class TrainingError(RuntimeError):
    """The outer optimization produced a non-finite risk."""
