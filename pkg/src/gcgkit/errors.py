"""Exception types shared across the toolkit."""


class GcgError(Exception):
    """Base class for all toolkit errors."""


class MalformedRle(GcgError, ValueError):
    pass


class DimensionMismatch(GcgError, ValueError):
    pass


class OutOfBounds(GcgError, ValueError):
    pass


class ParseError(GcgError, ValueError):
    """Grounded-text syntax error. ``offset`` is the position in the raw input."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnclosedPhrase(ParseError):
    pass


class DanglingSeg(ParseError):
    pass


class NestedPhrase(ParseError):
    pass


class CountMismatch(GcgError, ValueError):
    pass


class MissingReferences(GcgError, ValueError):
    pass


class SchemaError(GcgError, ValueError):
    pass


class UnknownImageId(GcgError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownObjectId(GcgError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyRegion(GcgError, ValueError):
    pass


class MissingDepth(GcgError, ValueError):
    pass


class DanglingReference(GcgError, ValueError):
    pass


class MalformedTag(GcgError, ValueError):
    pass


class NotRejected(GcgError, ValueError):
    pass


class ClientUnavailable(GcgError, RuntimeError):
    pass


class LlmUnavailable(ClientUnavailable):
    pass


class SegmenterUnavailable(ClientUnavailable):
    pass


class PreconditionViolated(GcgError, RuntimeError):
    pass


class ValidationExhausted(GcgError, RuntimeError):
    pass
