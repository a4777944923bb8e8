"""Exception types shared across the package."""


class NfprecondError(Exception):
    pass


class ConfigError(NfprecondError, ValueError):
    """Bad configuration, shape mismatch or inconsistent inputs."""


class FormatError(NfprecondError, ValueError):
    """Unreadable or unsupported input file."""


class NumericFailure(NfprecondError, ArithmeticError):
    """A non-finite value appeared where a finite one was required.

    ``node`` is the index of the first offending tape node when the failure
    came out of the autodiff machinery, otherwise None.
    """

    def __init__(self, message, node=None, op=None):
        super().__init__(message)
        self.node = node
        self.op = op


class DegenerateSpectrum(NumericFailure):
    pass


class RefusalError(NfprecondError):
    """A request exceeds a configured resource limit."""

    def __init__(self, message, limit=None):
        super().__init__(message)
        self.limit = limit
