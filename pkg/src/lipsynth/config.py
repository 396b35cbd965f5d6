"""Run configuration: one flat, typed mapping shared by CLI and library.

Config files are plain ``key=value`` lines (``#`` starts a comment).  The
same keys can be overridden on the command line with ``--set key=value``.
Two derived views matter downstream:

* :meth:`RunConfig.resolved_text` is the canonical serialization embedded in
  checkpoints and report headers, so every artifact records how it was made.
* :meth:`RunConfig.arch_fingerprint` hashes only the keys that change
  parameter shapes; adapters refuse to attach to a base model whose
  fingerprint differs.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError


@dataclass
class RunConfig:
    # Architecture.
    image_size: int = 64
    d_audio: int = 64
    d_face: int = 64
    d_sync: int = 64
    use_face_style: bool = True
    mapping_layers: int = 0
    enc_base: int = 32
    enc_max: int = 256
    gen_base: int = 32
    gen_max: int = 256
    disc_base: int = 32
    disc_max: int = 256
    n_perceptual: int = 3
    mask_enabled: bool = True

    # Generalized training.
    steps: int = 2000
    batch_windows: int = 1
    lambda_rec: float = 10.0
    lambda_sync: float = 1.0
    sync_start: int = 0
    adversarial: bool = True
    r1_gamma: float = 1.0
    r1_interval: int = 16
    grad_clip: float = 5.0
    lr_gen: float = 2e-3
    lr_disc: float = 2e-3
    lr_enc: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    d_init_weights: str = ""
    checkpoint_interval: int = 0
    log_interval: int = 1

    # Personalization.
    epochs: int = 5
    lambda_person: float = 1.0
    lr_personal: float = 2e-3
    widen_delta_scope: bool = False

    # Sync scoring.
    sync_max_offset: int = 15
    sync_batch: int = 16
    lr_sync: float = 1e-3
    sync_aug_noise: float = 0.05

    # Execution.
    seed: int = 0
    threads: int = 0

    def __post_init__(self) -> None:
        size = self.image_size
        if size < 8 or size & (size - 1) != 0:
            raise ValidationError(f"image_size must be a power of two >= 8, got {size}")
        for key in ("d_audio", "d_face", "d_sync", "enc_base", "enc_max",
                    "gen_base", "gen_max", "disc_base", "disc_max",
                    "batch_windows", "sync_batch"):
            if getattr(self, key) <= 0:
                raise ValidationError(f"{key} must be positive")
        if not 0 <= self.n_perceptual <= 4:
            raise ValidationError("n_perceptual must be in [0, 4]")
        for key in ("steps", "epochs", "mapping_layers", "checkpoint_interval",
                    "sync_max_offset", "sync_start", "threads"):
            if getattr(self, key) < 0:
                raise ValidationError(f"{key} must be non-negative")
        if self.r1_interval <= 0:
            raise ValidationError("r1_interval must be positive")
        for key in ("lambda_rec", "lambda_sync", "lambda_person", "r1_gamma",
                    "grad_clip", "sync_aug_noise"):
            if getattr(self, key) < 0:
                raise ValidationError(f"{key} must be non-negative")
        for key in ("lr_gen", "lr_disc", "lr_enc", "lr_personal", "lr_sync"):
            if getattr(self, key) <= 0:
                raise ValidationError(f"{key} must be positive")

    # -- construction --------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ValidationError(f"unknown config key '{key}'")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls().with_overrides(_parse_kv_lines(path))

    def with_overrides(self, mapping: dict[str, str]) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(self)}
        merged = dataclasses.asdict(self)
        for key, raw in mapping.items():
            if key not in known:
                raise ValidationError(f"unknown config key '{key}'")
            merged[key] = _coerce(key, raw, known[key].type)
        return RunConfig(**merged)

    # -- canonical views -----------------------------------------------

    def resolved_text(self) -> str:
        parts = []
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            parts.append(f"{field.name}={value}")
        return "\n".join(parts) + "\n"

    def arch_fingerprint(self) -> str:
        keys = (
            "image_size", "d_audio", "d_face", "d_sync", "use_face_style",
            "mapping_layers", "enc_base", "enc_max", "gen_base", "gen_max",
            "disc_base", "disc_max", "n_perceptual", "widen_delta_scope",
        )
        text = ";".join(f"{k}={getattr(self, k)}" for k in keys)
        return hashlib.sha256(text.encode("ascii")).hexdigest()[:16]


def _coerce(key: str, raw, annotation) -> object:
    if not isinstance(raw, str):
        return raw
    kind = str(annotation)
    try:
        if "bool" in kind:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError:
        raise ValidationError(f"cannot parse config value {key}={raw!r}") from None


def _parse_kv_lines(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def parse_override(text: str) -> tuple[str, str]:
    """Split a command-line ``key=value`` override."""
    if "=" not in text:
        raise ValidationError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()
