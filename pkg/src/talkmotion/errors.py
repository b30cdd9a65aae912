"""Exceptions raised when reading or validating on-disk artifacts."""


class ArtifactError(Exception):
    pass


class FormatError(ArtifactError):
    """Wrong magic bytes, unsupported version, or an unparsable file."""


class IntegrityError(ArtifactError):
    """Checksum, size, or shape disagreement inside an artifact."""
