"""Exception hierarchy shared across the package.

The CLI maps the three top-level families onto distinct exit codes.
"""


class BidFMError(Exception):
    pass


class ValidationError(BidFMError, ValueError):
    """Input violates a documented precondition."""


class FormatError(BidFMError, ValueError):
    """A byte stream or file does not follow its declared layout."""
