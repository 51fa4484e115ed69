"""Exception types shared across the pipeline."""

from __future__ import annotations


class TracetuneError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TracetuneError):
    """A persisted record could not be decoded."""


class ValidationError(TracetuneError):
    """A value violates a documented invariant."""


class InputError(TracetuneError):
    """An argument is outside an operation's domain."""


class ConfigError(TracetuneError):
    """Required configuration is missing or inconsistent."""


class ExtractionError(TracetuneError):
    """A teacher reply contains no extractable code block."""


class JudgmentParseError(TracetuneError):
    """A teacher verdict or ranking could not be interpreted."""


class TransportError(TracetuneError):
    """The teacher endpoint stayed unreachable after retries."""


class CacheMissError(TracetuneError):
    """Replay mode was asked for a request that was never recorded."""


class SandboxError(TracetuneError):
    """The verification sandbox could not be set up or torn down."""


class PatchApplyError(TracetuneError):
    """A unified-diff hunk did not apply cleanly."""


class NumericError(TracetuneError):
    """A non-finite value appeared during computation."""


class StateError(TracetuneError):
    """An operation was invoked before its prerequisites were produced."""


class TrainingError(TracetuneError):
    """Training diverged or breached a safety ceiling."""


class StageOrderError(TracetuneError):
    """A pipeline stage ran before its predecessors finished."""
