"""Exception hierarchy.

Every failure raised by the library derives from :class:`FrustumKitError`, so
callers (and the CLI) can map error families to exit codes without catching
bare ``Exception``.
"""


class FrustumKitError(Exception):
    """Base class for all library errors."""


class ConfigError(FrustumKitError):
    """Invalid or inconsistent configuration."""


class DataError(FrustumKitError):
    """Input data cannot be used (as opposed to a bad config)."""


# --- parsing -----------------------------------------------------------------


class ParseError(DataError):
    """A KITTI-style file could not be parsed.

    ``line`` is 1-based for text formats; ``offset`` is a byte offset for
    binary formats.  Either may be ``None`` when not meaningful.
    """

    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.offset = offset


class MalformedText(ParseError):
    """Bytes that do not decode as ASCII text."""


class MissingKey(ParseError):
    def __init__(self, name):
        super().__init__(f"missing key {name!r}")
        self.name = name


class MalformedFloat(ParseError):
    def __init__(self, token, line, column):
        super().__init__(f"malformed float {token!r} at column {column}", line=line)
        self.token = token
        self.column = column


class MalformedLine(ParseError):
    """A calib line without the ``KEY:`` prefix."""


class WrongArity(ParseError):
    def __init__(self, key, expected, got, line=None):
        super().__init__(f"key {key!r} expects {expected} values, got {got}", line=line)
        self.key = key
        self.expected = expected
        self.got = got


class WrongFieldCount(ParseError):
    def __init__(self, line, got):
        super().__init__(f"expected 15 or 16 fields, got {got}", line=line)
        self.got = got


class InvalidValue(ParseError):
    """Syntactically fine, but violates a value invariant (e.g. u_min > u_max)."""


class TruncatedRecord(ParseError):
    """Binary length is not a whole number of records."""


class MissingScore(DataError):
    """A detection was written without a confidence score."""


# --- geometry / pipeline ------------------------------------------------------


class EmptyFrustum(DataError):
    """No LiDAR point falls inside the 2D proposal's frustum."""


class EmptyMask(DataError):
    """A mask selected zero points."""


class NonFiniteScore(DataError):
    """A network output handed to the decoder contains NaN or Inf."""


class NonFiniteLoss(FrustumKitError):
    """The loss handed to ``backward`` is NaN or Inf."""


class CheckpointError(DataError):
    """A checkpoint file is malformed or does not match the model."""
