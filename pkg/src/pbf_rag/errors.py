"""Shared exception types."""


class PbfRagError(Exception):
    """Base class for all errors raised by this package."""


class DatasetError(PbfRagError):
    """Invalid taxonomy, annotation, or sample data."""


class CorpusError(PbfRagError):
    """Corpus manifest or ingested corpus layout problem."""


class PdfReadError(PbfRagError):
    """Unreadable or structurally broken PDF input."""


class EncryptedPdfError(PdfReadError):
    """Encrypted PDFs are not supported."""


class ChunkingError(PbfRagError):
    """Invalid text chunking parameters."""


class VectorError(PbfRagError):
    """Bad embedding vector input: dimension mismatch, zero vector, non-finite values."""


class IndexIoError(PbfRagError):
    """Persisted index file is missing, truncated, or from an unsupported version."""


class GatewayError(PbfRagError):
    """Base class for model-backend failures."""


class AuthenticationError(GatewayError):
    """Credentials rejected or missing; never retried."""


class ClientRequestError(GatewayError):
    """Backend rejected the request as malformed (4xx other than 429); never retried."""


class TransientBackendError(GatewayError):
    """Retriable failure: rate limit, server error, or network fault."""


class RetryExhaustedError(GatewayError):
    """All retry attempts failed."""


class PayloadError(GatewayError):
    """Request payload invalid before any network call: bad image bytes, empty text, oversize."""


class EmptyResponseError(GatewayError):
    """Backend returned an empty completion."""


class MissingFixtureError(GatewayError):
    """Strict mock received a request with no registered fixture."""


class FixtureConflictError(GatewayError):
    """Duplicate fixture key registered on a strict mock."""


class RetrievalError(PbfRagError):
    """Knowledge retrieval failed."""


class SectionParseError(PbfRagError):
    """A structured model response is missing required section headers."""


class TemplateError(PbfRagError):
    """Prompt template rendering left a placeholder unbound."""


class VerdictParseError(PbfRagError):
    """Classification response is not a bare 0 or 1."""


class DetectionError(PbfRagError):
    """Detection pipeline failure, annotated with anomaly/repetition context."""


class EvaluationError(PbfRagError):
    """Inconsistent prediction/truth inputs to the evaluation layer."""


class ConfigError(PbfRagError):
    """Run configuration file failed validation."""


class PrerequisiteError(PbfRagError):
    """A pipeline step was invoked before the artifacts it depends on exist."""

    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint


class LockError(PbfRagError):
    """Another invocation holds the output directory lock."""
