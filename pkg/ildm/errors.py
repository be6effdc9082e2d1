"""
Exception types shared by every part of the package.

Each error carries a category (one of ``config``, ``io``, ``contract`` or ``numeric``) and the key or path that
caused it, so that the command line can report failures as a single machine-parseable line.
"""


class IldmError(Exception):
    category = "contract"

    def __init__(self, message, key=None):
        super().__init__(message)
        self.message = message
        self.key = key

    def envelope(self):
        """One-line error report, e.g. ``error category=config key=lambda message="..."``"""
        key = self.key if self.key is not None else "-"
        message = self.message.replace("\n", " ").replace('"', "'")
        return f'error category={self.category} key={key} message="{message}"'


class ConfigError(IldmError, ValueError):
    category = "config"


class ContractError(IldmError, ValueError):
    category = "contract"


class DegenerateInputError(ContractError):
    pass


class NumericError(IldmError, ArithmeticError):
    category = "numeric"


class AbsoluteContinuityError(NumericError):
    pass


class VerificationError(NumericError):
    """An exact enumeration check found a violation beyond its tolerance."""


class ContainerIOError(IldmError, IOError):
    category = "io"

    def __init__(self, message, key=None, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, key=key)
        self.offset = offset


def check_same_shape(a, b, what="tensor"):
    """Raise a ContractError unless the two arrays/tensors have the same shape."""
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}", key=what)
