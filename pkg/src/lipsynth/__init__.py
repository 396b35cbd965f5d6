"""Audio-driven mouth inpainting at desk scale, with few-shot personalization.

The package synthesizes its own audio-visual toy data (:mod:`lipsynth.toyface`),
trains a style-modulated inpainting generator on it (:mod:`lipsynth.training`),
adapts the result to one speaker from seconds of data
(:mod:`lipsynth.personalization`), and verifies everything with pixel- and
sync-level metrics (:mod:`lipsynth.metrics`, :mod:`lipsynth.pipeline`).
"""

__version__ = "0.1.0"

from .config import RunConfig
from .errors import (
    AudioError,
    CheckpointError,
    DataError,
    LipsynthError,
    TrainingError,
    ValidationError,
)

__all__ = [
    "RunConfig",
    "LipsynthError",
    "ValidationError",
    "DataError",
    "AudioError",
    "CheckpointError",
    "TrainingError",
    "__version__",
]
