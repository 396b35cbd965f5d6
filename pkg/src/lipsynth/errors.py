"""Exception hierarchy with stable, machine-readable error codes.

Every error raised by the library derives from :class:`LipsynthError` and
carries a short ``code`` string.  The CLI prints failures as a single line
``error:{code}: {message}`` so scripts can match on the code without parsing
prose.
"""


class LipsynthError(Exception):
    """Base class for all library errors."""

    code = "internal"


class ValidationError(LipsynthError):
    """Malformed arguments: bad shapes, ranges, or inconsistent options."""

    code = "validation"


class DataError(LipsynthError):
    """Datasets or clips that violate a precondition (too short, missing)."""

    code = "data"


class AudioError(LipsynthError):
    """Audio input problems: unsupported rate, bad file, empty waveform."""

    code = "audio"


class CheckpointError(LipsynthError):
    """Checkpoint container problems: version, checksum, missing arrays."""

    code = "checkpoint"


class TrainingError(LipsynthError):
    """Failures inside an optimization loop (divergence, missing scorer)."""

    code = "training"
