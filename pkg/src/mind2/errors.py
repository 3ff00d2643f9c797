"""Exception types shared across the toolkit."""


class Mind2Error(Exception):
    """Base class for all toolkit errors."""


class CorpusError(Mind2Error, ValueError):
    """Malformed or invalid source corpus data."""

    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class BackendError(Mind2Error):
    """Transport-level backend failure (retryable)."""


class BackendAuthError(Mind2Error):
    """Authentication/configuration failure (not retryable)."""


class ExtractionError(Mind2Error):
    """Knowledge extraction failed for a specific utterance/component."""

    def __init__(self, message, conversation_id=None, index=None, component=None):
        super().__init__(message)
        self.conversation_id = conversation_id
        self.index = index
        self.component = component


class LinearizationError(Mind2Error, ValueError):
    """Sequence construction failed (marker collision and similar)."""


class BudgetError(LinearizationError):
    """Token budget too small for the minimal sequence."""


class ExportError(Mind2Error):
    """Training-data export could not complete."""
