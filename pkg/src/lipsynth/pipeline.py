"""Checkpoint kinds, cross-driven inference, and clip-level evaluation.

A checkpoint of any kind embeds the resolved config it was built with, so
loading never needs the original config file.  Inference drives a template
clip with arbitrary 16 kHz audio: each 5-frame window is masked, encoded
with one seeded reference frame, regenerated from the driving mel slabs,
and blended back into the template inside the mask's bounding box, leaving
every pixel outside that box bit-identical to the template.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import (
    CheckpointContainer,
    load_container,
    load_module_arrays,
    module_arrays,
    save_container,
)
from .clipio import ClipStore, save_clip
from .config import RunConfig
from .errors import CheckpointError, DataError, ValidationError
from .generator import Backbone, blend_into_frame, build_backbone
from .melspec import SAMPLES_PER_FRAME, audio_envelope, compute_mel, mel_slab
from .metrics import (
    IdentityEmbedder,
    estimate_mouth_landmarks,
    estimated_lmd,
    identity_distance,
    mouth_corr,
    psnr,
    ssim,
)
from .personalization import PersonalAdapter, adapted_window
from .syncnet import WINDOW_FRAMES, SyncNet, sync_confidence
from .toyface import VideoClip, build_umask
from .training import Discriminator

KIND_BACKBONE = "backbone"
KIND_SYNCNET = "syncnet"
KIND_DISCRIMINATOR = "discriminator"
KIND_ADAPTER = "adapter"

INFER_MANIFEST_NAME = "infer_manifest.json"
BLEND_FEATHER_PX = 2


def config_from_text(text: str) -> RunConfig:
    mapping = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"bad config line in checkpoint: '{line}'")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return RunConfig.from_mapping(mapping)


def _container(kind: str, config: RunConfig, arrays: dict[str, np.ndarray],
               meta: dict[str, str] | None = None) -> CheckpointContainer:
    return CheckpointContainer(
        kind=kind, config_text=config.resolved_text(),
        fingerprint=config.arch_fingerprint(), arrays=arrays,
        meta=meta or {})


def save_backbone(backbone: Backbone, config: RunConfig,
                  path: str | Path) -> Path:
    arrays = {}
    for name, module in backbone.modules_by_name().items():
        arrays.update(module_arrays(module, name))
    return save_container(_container(KIND_BACKBONE, config, arrays), path)


def load_backbone(path: str | Path) -> tuple[Backbone, RunConfig]:
    container = load_container(path, kind=KIND_BACKBONE)
    config = config_from_text(container.config_text)
    backbone = build_backbone(config, seed=0)
    for name, module in backbone.modules_by_name().items():
        load_module_arrays(module, container, name)
    backbone.eval()
    return backbone, config


def save_syncnet(model: SyncNet, config: RunConfig, path: str | Path) -> Path:
    arrays = module_arrays(model, "syncnet")
    return save_container(_container(KIND_SYNCNET, config, arrays), path)


def load_syncnet(path: str | Path) -> tuple[SyncNet, RunConfig]:
    container = load_container(path, kind=KIND_SYNCNET)
    config = config_from_text(container.config_text)
    model = SyncNet(config.image_size, config.d_sync)
    load_module_arrays(model, container, "syncnet")
    model.eval()
    return model, config


def save_discriminator(model: Discriminator, config: RunConfig,
                       path: str | Path) -> Path:
    arrays = module_arrays(model, "discriminator")
    return save_container(_container(KIND_DISCRIMINATOR, config, arrays), path)


def load_discriminator(path: str | Path) -> tuple[Discriminator, RunConfig]:
    container = load_container(path, kind=KIND_DISCRIMINATOR)
    config = config_from_text(container.config_text)
    model = Discriminator(config.image_size, base=config.disc_base,
                          cap=config.disc_max)
    load_module_arrays(model, container, "discriminator")
    model.eval()
    return model, config


def save_adapter(adapter: PersonalAdapter, config: RunConfig,
                 path: str | Path) -> Path:
    arrays = module_arrays(adapter, "adapter")
    meta = {"person_id": adapter.person_id,
            "base_fingerprint": adapter.base_fingerprint}
    return save_container(_container(KIND_ADAPTER, config, arrays, meta), path)


def load_adapter(path: str | Path, backbone: Backbone,
                 config: RunConfig) -> PersonalAdapter:
    """Load an adapter onto a backbone with a matching architecture."""
    container = load_container(path, kind=KIND_ADAPTER)
    expected = config.arch_fingerprint()
    found = container.meta.get("base_fingerprint", container.fingerprint)
    if found != expected:
        raise CheckpointError(
            f"adapter was trained against architecture {found}, this "
            f"backbone has {expected}")
    saved_config = config_from_text(container.config_text)
    adapter = PersonalAdapter(backbone, saved_config,
                              person_id=container.meta.get("person_id", ""))
    load_module_arrays(adapter, container, "adapter")
    adapter.eval()
    return adapter


# -- inference --------------------------------------------------------------


@dataclass
class InferenceResult:
    """Blended output frames plus everything needed to reproduce them."""

    frames: np.ndarray = field(repr=False)      # [T, S, S, 3] float32
    waveform: np.ndarray = field(repr=False)    # [T * 640] float32
    reference_index: int = 0
    manifest: dict = field(default_factory=dict)

    def to_clip(self) -> VideoClip:
        return VideoClip(frames=self.frames, waveform=self.waveform,
                         mel=compute_mel(self.waveform))


def _window_starts(n_frames: int) -> list[int]:
    """Non-overlapping starts plus a tail window ending at the last frame."""
    starts = list(range(0, n_frames - WINDOW_FRAMES + 1, WINDOW_FRAMES))
    tail = n_frames - WINDOW_FRAMES
    if starts[-1] != tail:
        starts.append(tail)
    return starts


def _palindrome_indices(n_frames: int, length: int) -> np.ndarray:
    """Forward-backward template frame order, endpoints not repeated."""
    if n_frames == 1:
        return np.zeros(length, dtype=np.int64)
    cycle = np.concatenate([np.arange(n_frames),
                            np.arange(n_frames - 2, 0, -1)])
    return np.resize(cycle, length)


def mask_bounding_box(size: int) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) of the inpainting mask, end-exclusive."""
    mask = build_umask(size)
    rows = np.nonzero(mask.values.any(axis=1))[0]
    cols = np.nonzero(mask.values.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def generate_frames(backbone: Backbone, template_frames: np.ndarray,
                    mel: np.ndarray, config: RunConfig,
                    reference_index: int,
                    adapter: PersonalAdapter | None = None) -> np.ndarray:
    """Regenerate every template frame from audio; raw generator output.

    Windows advance in strides of 5 with one overlapping tail window; the
    overlap keeps later frames, so each output frame is produced exactly
    once.  The same reference frame conditions every window.
    """
    n_frames = template_frames.shape[0]
    if n_frames < WINDOW_FRAMES:
        raise DataError(f"template must have at least {WINDOW_FRAMES} "
                        f"frames, got {n_frames}")
    if not 0 <= reference_index < n_frames:
        raise ValidationError(
            f"reference index {reference_index} outside template of "
            f"{n_frames} frames")
    size = template_frames.shape[1]
    if size != config.image_size:
        raise ValidationError(
            f"template frames are {size}x{size}, model expects "
            f"{config.image_size}")
    mask = build_umask(size)
    keep = torch.from_numpy(
        (1 - mask.values).astype(np.float32))[None, None]
    ref = torch.from_numpy(
        template_frames[reference_index]).permute(2, 0, 1)[None]
    ref = ref.repeat(WINDOW_FRAMES, 1, 1, 1)

    out = np.empty_like(template_frames)
    filled = 0
    with torch.no_grad():
        for start in _window_starts(n_frames):
            targets = torch.from_numpy(
                template_frames[start:start + WINDOW_FRAMES]
            ).permute(0, 3, 1, 2).contiguous()
            slabs = torch.from_numpy(np.stack(
                [mel_slab(mel, start + j) for j in range(WINDOW_FRAMES)]))
            window = adapted_window(backbone, adapter, targets * keep, ref,
                                    slabs, config)
            frames = window.permute(0, 2, 3, 1).numpy()
            for j in range(WINDOW_FRAMES):
                if start + j >= filled:
                    out[start + j] = frames[j]
            filled = max(filled, start + WINDOW_FRAMES)
    return np.clip(out, 0.0, 1.0)


def infer(backbone: Backbone, template: VideoClip, waveform: np.ndarray,
          config: RunConfig, adapter: PersonalAdapter | None = None,
          reference_index: int | None = None, seed: int = 0,
          loop_template: bool = False,
          feather_px: int = BLEND_FEATHER_PX) -> InferenceResult:
    """Drive ``template`` with ``waveform``; blend into the template frames.

    The driving audio is trimmed to the template length; with
    ``loop_template`` the template is instead extended by palindromic frame
    looping to cover all of the audio.  The reference frame defaults to a
    seeded random template frame.
    """
    wave = np.asarray(waveform, dtype=np.float32)
    audio_frames = len(wave) // SAMPLES_PER_FRAME
    if audio_frames < WINDOW_FRAMES:
        raise DataError(
            f"driving audio covers {audio_frames} frames; need at least "
            f"{WINDOW_FRAMES}")
    template_frames = template.frames
    if loop_template:
        n_out = audio_frames
        order = _palindrome_indices(template_frames.shape[0], n_out)
        template_frames = template_frames[order]
    else:
        n_out = min(template_frames.shape[0], audio_frames)
        template_frames = template_frames[:n_out]
    wave = wave[: n_out * SAMPLES_PER_FRAME]
    mel = compute_mel(wave)

    rng = np.random.default_rng(seed)
    if reference_index is None:
        reference_index = int(rng.integers(template_frames.shape[0]))

    for module in backbone.modules_by_name().values():
        module.eval()
    generated = generate_frames(backbone, template_frames, mel, config,
                                reference_index, adapter)

    box = mask_bounding_box(config.image_size)
    y0, x0, y1, x1 = box
    blended = np.stack([
        blend_into_frame(generated[t, y0:y1, x0:x1], template_frames[t],
                         crop_box=box, feather_px=feather_px)
        for t in range(n_out)])

    manifest = {
        "package_version": __version__,
        "fingerprint": config.arch_fingerprint(),
        "seed": seed,
        "reference_index": reference_index,
        "loop_template": loop_template,
        "feather_px": feather_px,
        "n_frames": n_out,
        "adapter_person": adapter.person_id if adapter is not None else "",
        "crop_box": list(box),
    }
    return InferenceResult(frames=blended, waveform=wave,
                           reference_index=reference_index,
                           manifest=manifest)


def infer_to_dir(result: InferenceResult, directory: str | Path) -> Path:
    """Write the output as a loadable clip directory plus an inference
    manifest recording seeds and inputs."""
    directory = Path(directory)
    save_clip(result.to_clip(), directory)
    manifest_path = directory / INFER_MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    return directory


# -- evaluation -------------------------------------------------------------


@dataclass
class ClipMetrics:
    name: str
    ssim: float
    psnr: float
    lmd: float
    sync_conf: float
    d_id: float
    mouth_corr: float

    FIELDS = ("ssim", "psnr", "lmd", "sync_conf", "d_id", "mouth_corr")

    def values(self) -> list[float]:
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class MetricsReport:
    per_clip: list[ClipMetrics]
    fingerprint: str

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Metric name -> (mean, std) over clips, ignoring NaN entries."""
        out = {}
        for index, name in enumerate(ClipMetrics.FIELDS):
            column = np.array([clip.values()[index]
                               for clip in self.per_clip])
            valid = column[~np.isnan(column)]
            if len(valid) == 0:
                out[name] = (float("nan"), float("nan"))
            else:
                out[name] = (float(valid.mean()), float(valid.std()))
        return out

    def to_tsv(self) -> str:
        lines = [f"# fingerprint={self.fingerprint}",
                 "clip\t" + "\t".join(ClipMetrics.FIELDS)]
        for clip in self.per_clip:
            lines.append(clip.name + "\t"
                         + "\t".join(f"{v:.6f}" for v in clip.values()))
        stats = self.aggregate()
        lines.append("mean\t" + "\t".join(
            f"{stats[f][0]:.6f}" for f in ClipMetrics.FIELDS))
        lines.append("std\t" + "\t".join(
            f"{stats[f][1]:.6f}" for f in ClipMetrics.FIELDS))
        return "\n".join(lines) + "\n"


def evaluate_pair(name: str, generated: VideoClip, target: VideoClip,
                  syncnet: SyncNet | None = None,
                  embedder: IdentityEmbedder | None = None,
                  sync_max_offset: int = 15) -> ClipMetrics:
    """Metrics of one generated clip against its ground-truth target.

    Frame counts may differ (cross-driving trims); the overlapping prefix is
    compared.  Both sides of the landmark distance go through the pixel
    estimator, so identical clips score exactly zero.  ``sync_conf`` is NaN
    without a scorer or when the clip is too short for the offset search.
    """
    n = min(generated.n_frames, target.n_frames)
    if n < 1:
        raise DataError("nothing to evaluate: zero overlapping frames")
    gen = generated.frames[:n]
    ref = target.frames[:n]
    if gen.shape[1:] != ref.shape[1:]:
        raise ValidationError(
            f"generated frames {gen.shape[1:]} vs target {ref.shape[1:]}")

    embedder = embedder or IdentityEmbedder()
    ssim_vals = [ssim(gen[t], ref[t]) for t in range(n)]
    psnr_vals = [psnr(gen[t], ref[t]) for t in range(n)]
    d_id_vals = [identity_distance(gen[t], ref[t], embedder)
                 for t in range(n)]

    target_marks = np.stack([estimate_mouth_landmarks(f) for f in ref])
    lmd_val = estimated_lmd(gen, target_marks)

    sync_val = float("nan")
    if syncnet is not None and n >= WINDOW_FRAMES + 2 * sync_max_offset:
        sync_val = sync_confidence(gen, generated.mel, syncnet,
                                   max_offset=sync_max_offset)

    env = audio_envelope(generated.waveform, n)
    return ClipMetrics(
        name=name,
        ssim=float(np.mean(ssim_vals)),
        psnr=float(np.mean(psnr_vals)),
        lmd=lmd_val,
        sync_conf=sync_val,
        d_id=float(np.mean(d_id_vals)),
        mouth_corr=mouth_corr(gen, env),
    )


def self_driven_report(backbone: Backbone, store: ClipStore,
                       config: RunConfig,
                       adapter: PersonalAdapter | None = None,
                       syncnet: SyncNet | None = None,
                       seed: int = 0) -> tuple[MetricsReport, list[VideoClip]]:
    """Regenerate every clip from its own audio and score it.

    This is the quantitative evaluation protocol: the target frames are the
    originals, and the reference frame is one seeded random frame per clip.
    """
    embedder = IdentityEmbedder()
    reports = []
    outputs = []
    for clip_index, stored in enumerate(store.clips):
        template = stored.to_clip()
        result = infer(backbone, template, template.waveform, config,
                       adapter=adapter, seed=seed + clip_index)
        generated = result.to_clip()
        generated = VideoClip(
            frames=generated.frames, waveform=generated.waveform,
            mel=generated.mel, mouth_open_gt=None, mouth_landmarks_gt=None,
            speaker=template.speaker)
        outputs.append(generated)
        reports.append(evaluate_pair(
            stored.name, generated, template, syncnet=syncnet,
            embedder=embedder, sync_max_offset=config.sync_max_offset))
    return (MetricsReport(per_clip=reports,
                          fingerprint=config.arch_fingerprint()),
            outputs)
