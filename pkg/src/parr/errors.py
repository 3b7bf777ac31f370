"""Exception hierarchy shared across the package."""


class ParrError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(ParrError):
    """Malformed attribute schema (duplicate names, bad tag bindings, ...)."""


class InvalidQueryError(ParrError):
    """Attribute query does not fit the schema (length or value domain)."""


class AmbiguousQueryError(ParrError):
    """Two active attributes compete for a single-valued template slot."""


class ProviderError(ParrError):
    """The word-embedding provider failed or returned malformed output."""


class ConfigError(ParrError):
    """Invalid or inconsistent run/model configuration."""


class NumericError(ParrError):
    """Non-finite values where finite tensors are required."""


class CheckpointError(ParrError):
    """Missing, corrupt, or mismatched checkpoint archive."""


class ManifestError(ParrError):
    """Broken dataset manifest (parse failure, schema mismatch, ...)."""


class DegenerateEmbeddingError(ParrError):
    """Zero-norm embedding where cosine geometry is undefined."""


class TrainingDivergedError(ParrError):
    """Loss became non-finite during optimization."""
