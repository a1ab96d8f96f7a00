"""Error taxonomy shared across the package.

Two classes of failure are distinguished on purpose: bad inputs from a
caller (ValidationError, CLI exit code 1) and broken internal contracts
(InvariantError, CLI exit code 2).
"""


class ValidationError(ValueError):
    """Caller-supplied inputs violate a documented precondition."""


class InvariantError(RuntimeError):
    """An internal consistency condition failed; indicates a bug."""
