"""Checkpoint container: named arrays plus a manifest in one ZIP file.

The container is a ZIP holding ``manifest.json`` and one raw little-endian
binary per array under ``arrays/``.  The manifest records the format
version, the package version, the container kind, the fully resolved
config text, the architecture fingerprint, and per-array shape, dtype, and
SHA-256.  Entries are stored uncompressed with fixed timestamps and sorted
names, so identical content produces identical file bytes; nothing in the
container depends on wall-clock time or the environment.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .errors import CheckpointError, ValidationError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ARRAY_DIR = "arrays"
# DOS epoch; the earliest timestamp a ZIP entry can carry.
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointContainer:
    """In-memory form of one checkpoint file."""

    kind: str
    config_text: str
    fingerprint: str
    arrays: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.kind:
            raise ValidationError("container kind must be non-empty")
        for name, array in self.arrays.items():
            if not name or name.startswith("/") or ".." in name:
                raise ValidationError(f"bad array name '{name}'")
            if not isinstance(array, np.ndarray):
                raise ValidationError(f"array '{name}' is not a numpy array")
        for key, value in self.meta.items():
            if not isinstance(value, str):
                raise ValidationError(f"meta entry '{key}' must be a string")

    def select(self, prefix: str) -> "CheckpointContainer":
        """A view containing only arrays whose name starts with ``prefix``."""
        chosen = {name: array for name, array in self.arrays.items()
                  if name.startswith(prefix)}
        if not chosen:
            raise CheckpointError(
                f"no arrays match prefix '{prefix}'; container has "
                f"{sorted(self.arrays)[:8]}...")
        return CheckpointContainer(kind=self.kind,
                                   config_text=self.config_text,
                                   fingerprint=self.fingerprint,
                                   arrays=chosen, meta=dict(self.meta))


def _canonical_bytes(array: np.ndarray) -> tuple[np.ndarray, str]:
    """Contiguous little-endian form plus its dtype string."""
    # not ascontiguousarray: that would promote 0-dim arrays to 1-dim
    arr = np.asarray(array, order="C")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr, arr.dtype.str


def save_container(container: CheckpointContainer, path: str | Path) -> Path:
    """Write the container; returns the path.  Byte-deterministic."""
    path = Path(path)
    entries = {}
    arrays_meta = {}
    for name in sorted(container.arrays):
        arr, dtype_str = _canonical_bytes(container.arrays[name])
        raw = arr.tobytes()
        arrays_meta[name] = {
            "shape": list(arr.shape),
            "dtype": dtype_str,
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
        entries[f"{ARRAY_DIR}/{name}.bin"] = raw
    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "kind": container.kind,
        "config": container.config_text,
        "fingerprint": container.fingerprint,
        "meta": dict(sorted(container.meta.items())),
        "arrays": arrays_meta,
    }
    manifest_raw = json.dumps(manifest, sort_keys=True,
                              separators=(",", ":")).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as zf:
        for filename, raw in [(MANIFEST_NAME, manifest_raw),
                              *sorted(entries.items())]:
            info = zipfile.ZipInfo(filename, date_time=_FIXED_DATE)
            info.external_attr = 0o600 << 16
            zf.writestr(info, raw)
    path.write_bytes(buffer.getvalue())
    return path


def load_container(path: str | Path, kind: str | None = None
                   ) -> CheckpointContainer:
    """Read and fully verify a container file.

    Every array's checksum is checked; ``kind`` (when given) must match the
    manifest.  Unknown format versions are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path} is not a checkpoint container: {exc}")
    with zf:
        names = set(zf.namelist())
        if MANIFEST_NAME not in names:
            raise CheckpointError(f"{path}: missing {MANIFEST_NAME}")
        try:
            manifest = json.loads(zf.read(MANIFEST_NAME))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: unreadable manifest: {exc}")
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version!r} not supported "
                f"(expected {FORMAT_VERSION})")
        if kind is not None and manifest.get("kind") != kind:
            raise CheckpointError(
                f"{path}: container kind '{manifest.get('kind')}' is not "
                f"'{kind}'")
        arrays = {}
        for name, info in manifest.get("arrays", {}).items():
            entry = f"{ARRAY_DIR}/{name}.bin"
            if entry not in names:
                raise CheckpointError(f"{path}: missing array file '{name}'")
            raw = zf.read(entry)
            digest = hashlib.sha256(raw).hexdigest()
            if digest != info["sha256"]:
                raise CheckpointError(
                    f"{path}: checksum mismatch for array '{name}'")
            arrays[name] = np.frombuffer(
                raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    return CheckpointContainer(
        kind=str(manifest.get("kind", "")),
        config_text=str(manifest.get("config", "")),
        fingerprint=str(manifest.get("fingerprint", "")),
        arrays=arrays,
        meta={k: str(v) for k, v in manifest.get("meta", {}).items()})


# -- module state <-> arrays ----------------------------------------------


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """State dict (parameters and buffers) as named numpy arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}.{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_module_arrays(module: nn.Module, container: CheckpointContainer,
                       prefix: str) -> None:
    """Restore a module's state dict strictly from ``prefix``-named arrays.

    Missing and unexpected names are both rejected, listing the offenders.
    """
    dot = f"{prefix}."
    available = {name[len(dot):]: array
                 for name, array in container.arrays.items()
                 if name.startswith(dot)}
    expected = module.state_dict()
    missing = sorted(set(expected) - set(available))
    unexpected = sorted(set(available) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"array names do not match module '{prefix}': "
            f"missing {missing}, unexpected {unexpected}")
    loaded = {}
    for name, target in expected.items():
        array = available[name]
        if tuple(array.shape) != tuple(target.shape):
            raise CheckpointError(
                f"array '{prefix}.{name}' has shape {tuple(array.shape)}, "
                f"module expects {tuple(target.shape)}")
        tensor = torch.from_numpy(array)
        if tensor.dtype != target.dtype:
            raise CheckpointError(
                f"array '{prefix}.{name}' has dtype {tensor.dtype}, "
                f"module expects {target.dtype}")
        loaded[name] = tensor
    module.load_state_dict(loaded, strict=True)
