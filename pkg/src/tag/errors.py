"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TagError(Exception):
    """Base class for all package errors."""


class ValidationError(TagError):
    """A domain-type invariant does not hold."""


class InvalidParams(TagError):
    """An operation was called with out-of-range parameters."""


class IoError(TagError):
    """A file is missing or unreadable."""


class EncodingError(TagError):
    """Input bytes are not valid UTF-8."""


class ParseError(TagError):
    """Structured text could not be parsed.

    Carries an optional 1-based line number for line-oriented inputs.
    """

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateIdError(TagError):
    """An identifier that must be unique appeared twice."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(TagError):
    """Model output did not match the required JSON shape after repair."""


class DanglingRefError(TagError):
    """An item cites an identifier that does not exist."""


class TransportError(TagError):
    """A model call failed at the transport level after retries."""

    def __init__(self, message: str, request_tag: str = ""):
        super().__init__(message)
        self.request_tag = request_tag


class ScriptError(TagError):
    """A scripted provider received a request no entry matches."""


class DimensionMismatchError(TagError):
    """Embedding vectors of different dimensionality were mixed."""


class ZeroVectorError(TagError):
    """Cosine similarity is undefined for an all-zero vector."""


class EmptyIndexError(TagError):
    """A similarity query was issued against an empty index."""


class TemplateError(TagError):
    """A prompt template slot could not be filled."""


class LocationError(TagError):
    """A text fragment could not be located in its document."""


class MatchError(TagError):
    """A pairwise matching run failed; carries partial decisions."""

    def __init__(self, message: str, decisions: list | None = None):
        super().__init__(message)
        self.decisions = decisions or []


class MissingGoldError(TagError):
    """A case lacks the gold answer required for scoring."""


class MissingScoreError(TagError):
    """An external score report lacks entries for some cases."""

    def __init__(self, message: str, case_ids: list[str] | None = None):
        super().__init__(message)
        self.case_ids = case_ids or []


class MixedDomainError(TagError):
    """Scores from different domains were aggregated together."""


class EmptyInputError(TagError):
    """An operation that needs at least one item received none."""


class ConfigError(TagError):
    """The experiment configuration is incomplete or inconsistent."""
