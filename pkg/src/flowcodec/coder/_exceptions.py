class CoderError(Exception):
    """Base class for entropy coding failures."""


class DecodeError(CoderError):
    """Raised when a bitstream is truncated or undecodable.

    Not every corruption is detectable; a corrupt stream that stays within
    valid coder states decodes to garbage symbols without raising.
    """
