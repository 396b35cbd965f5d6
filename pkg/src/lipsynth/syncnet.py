"""Audio-visual sync scoring: two towers trained with contrastive BCE.

The visual tower embeds 5 consecutive lower-half frames (channel-stacked,
[B, 15, S/2, S]); the audio tower embeds the 16-column log-mel slab aligned
with the window's first frame.  Cosine similarity between the two
embeddings is the alignment score; training pushes it toward +1 for aligned
pairs and -1 for misaligned ones via BCE on (cos + 1) / 2.

Both towers batch-normalize after every conv.  This is load-bearing, not a
speed tweak: without it the embeddings are dominated by an input-independent
component (the shared face/spectrogram layout), the cosine is nearly blind
to alignment, and training sits at the ln(2) chance plateau indefinitely.
Batch statistics subtract exactly that shared component.  Per-sample
normalization (instance/group norm) does not break the plateau, so batch
norm specifically is required.  Training runs in train mode (batch stats);
trained models score in eval mode (running averages).

Negative pairs are, with equal probability, a slab from the same clip at
least 5 frames away or a slab from a different clip.  Batches are balanced:
half positive, half negative.

``sync_confidence`` scores a finished clip the way an offset-search readout
does: for each valid window, the maximum minus mean cosine over audio
offsets -15..15, averaged over windows.  Clips must be long enough that
every probed offset stays in range (T >= 5 + 2 * max_offset).
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .clipio import ClipStore
from .config import RunConfig
from .errors import DataError, ValidationError
from .melspec import mel_slab
from .encoders import MEL_INPUT_SCALE

WINDOW_FRAMES = 5
NEGATIVE_MIN_OFFSET = 5


def sync_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dim; zero-norm inputs are rejected."""
    if a.shape != b.shape:
        raise ValidationError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    norm_a = a.norm(dim=-1)
    norm_b = b.norm(dim=-1)
    if (norm_a < 1e-12).any() or (norm_b < 1e-12).any():
        raise ValidationError("cannot score a zero-norm embedding")
    return (a * b).sum(dim=-1) / (norm_a * norm_b)


def _tower(in_channels: int, widths: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    previous = in_channels
    for width in widths:
        layers.extend([
            nn.Conv2d(previous, width, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2),
        ])
        previous = width
    return nn.Sequential(*layers)


def _downsampled(extent: int, n_halvings: int) -> int:
    # stride-2 conv, kernel 3, padding 1: out = ceil(in / 2)
    for _ in range(n_halvings):
        extent = (extent + 1) // 2
    return extent


class SyncNet(nn.Module):
    VISUAL_WIDTHS = (32, 64, 64, 64)
    AUDIO_WIDTHS = (16, 32, 64, 64)

    def __init__(self, image_size: int, d_sync: int = 64):
        super().__init__()
        if image_size < 16:
            raise ValidationError(
                f"sync scoring needs image_size >= 16, got {image_size}")
        self.image_size = image_size
        self.d_sync = d_sync

        self.visual_tower = _tower(3 * WINDOW_FRAMES, self.VISUAL_WIDTHS)
        depth = len(self.VISUAL_WIDTHS)
        flat = (self.VISUAL_WIDTHS[-1]
                * _downsampled(image_size // 2, depth)
                * _downsampled(image_size, depth))
        self.visual_head = nn.Linear(flat, d_sync)

        self.audio_tower = _tower(1, self.AUDIO_WIDTHS)
        flat = (self.AUDIO_WIDTHS[-1]
                * _downsampled(80, len(self.AUDIO_WIDTHS))
                * _downsampled(16, len(self.AUDIO_WIDTHS)))
        self.audio_head = nn.Linear(flat, d_sync)

    def visual_embed(self, windows: torch.Tensor) -> torch.Tensor:
        """Windows [B, 5, S/2, S, 3] (frame-major channel stacking)."""
        expected = (WINDOW_FRAMES, self.image_size // 2, self.image_size, 3)
        if windows.ndim != 5 or windows.shape[1:] != expected:
            raise ValidationError(
                f"visual windows must be [B, {expected[0]}, {expected[1]}, "
                f"{expected[2]}, 3], got {tuple(windows.shape)}")
        x = windows.permute(0, 1, 4, 2, 3).reshape(
            windows.shape[0], 15, self.image_size // 2, self.image_size)
        return self.visual_head(self.visual_tower(x).flatten(1))

    def audio_embed(self, slabs: torch.Tensor) -> torch.Tensor:
        if slabs.ndim != 3 or slabs.shape[1] != 80 or slabs.shape[2] != 16:
            raise ValidationError(
                f"slabs must be [B, 80, 16], got {tuple(slabs.shape)}")
        x = slabs.unsqueeze(1) * MEL_INPUT_SCALE
        return self.audio_head(self.audio_tower(x).flatten(1))

    def score(self, windows: torch.Tensor, slabs: torch.Tensor) -> torch.Tensor:
        return sync_cosine(self.visual_embed(windows), self.audio_embed(slabs))


def lower_half_window(frames: np.ndarray, start: int) -> np.ndarray:
    """Lower-half 5-frame stack [5, S/2, S, 3] beginning at ``start``."""
    frames = np.asarray(frames)
    size = frames.shape[1]
    if start < 0 or start + WINDOW_FRAMES > frames.shape[0]:
        raise ValidationError(
            f"window [{start}, {start + WINDOW_FRAMES}) outside clip of "
            f"{frames.shape[0]} frames")
    return frames[start: start + WINDOW_FRAMES, size // 2:, :, :]


def freeze_module(module: nn.Module) -> nn.Module:
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def state_bytes(module: nn.Module) -> bytes:
    """Concatenated parameter bytes; used to assert freeze contracts."""
    chunks = []
    for _, param in sorted(module.state_dict().items()):
        chunks.append(param.detach().numpy().tobytes())
    return b"".join(chunks)


@dataclass
class SyncTrainResult:
    model: SyncNet
    final_loss: float
    losses: list[float] = field(repr=False, default_factory=list)


def train_syncnet(store: ClipStore, config: RunConfig,
                  steps: int | None = None) -> SyncTrainResult:
    """Train the scorer on aligned/misaligned window-slab pairs.

    The learning rate follows a cosine ramp from ``lr_sync`` to zero over
    the run, which buys a few points of held-out AUC at fixed steps.  The
    returned model is left in eval mode: scoring uses the running
    batch-norm averages accumulated during training.

    Two curriculum details matter when the scorer later guides a
    generator.  Visual windows are noise-augmented (``sync_aug_noise``) so
    the score cannot attach to brittle pixel textures, and a third of the
    negatives keep the aligned slab but freeze the window to one repeated
    frame: a mouth that never moves must score as out of sync, otherwise
    the downstream sync loss is satisfiable without following the audio.
    """
    store.require_min_frames(WINDOW_FRAMES)
    steps = config.steps if steps is None else steps
    batch = config.sync_batch
    if batch < 2 or batch % 2 != 0:
        raise ValidationError("sync_batch must be even and at least 2")

    torch.manual_seed(config.seed)
    model = SyncNet(store.size, config.d_sync)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_sync)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: 0.5 * (1.0 + math.cos(math.pi * s / max(steps, 1))))
    rng = np.random.default_rng(config.seed + 1)
    losses: list[float] = []

    for _ in range(steps):
        windows = np.empty((batch, WINDOW_FRAMES, store.size // 2, store.size, 3),
                           dtype=np.float32)
        slabs = np.empty((batch, 80, 16), dtype=np.float32)
        labels = np.zeros(batch, dtype=np.float32)
        labels[: batch // 2] = 1.0
        for i in range(batch):
            clip_index = int(rng.integers(len(store)))
            clip = store.clips[clip_index]
            t = int(rng.integers(clip.n_frames - WINDOW_FRAMES + 1))
            windows[i] = lower_half_window(clip.frames_f32(
                np.arange(t, t + WINDOW_FRAMES)), 0)
            if labels[i] > 0.5:
                slabs[i] = mel_slab(clip.mel, t)
            elif rng.integers(3) == 0:
                windows[i] = np.repeat(windows[i, :1], WINDOW_FRAMES, axis=0)
                slabs[i] = mel_slab(clip.mel, t)
            else:
                slabs[i] = _negative_slab(store, clip_index, t, rng)
        if config.sync_aug_noise > 0:
            windows += rng.normal(0.0, config.sync_aug_noise,
                                  windows.shape).astype(np.float32)
            np.clip(windows, 0.0, 1.0, out=windows)
        loss = _bce_on_cosine(
            model,
            torch.from_numpy(windows),
            torch.from_numpy(slabs),
            torch.from_numpy(labels),
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        losses.append(float(loss.item()))

    model.eval()
    final = float(np.mean(losses[-50:])) if losses else float("nan")
    return SyncTrainResult(model=model, final_loss=final, losses=losses)


def _bce_on_cosine(model: SyncNet, windows: torch.Tensor, slabs: torch.Tensor,
                   labels: torch.Tensor) -> torch.Tensor:
    cos = model.score(windows, slabs)
    probs = torch.clamp((cos + 1.0) / 2.0, 1e-7, 1.0 - 1e-7)
    return F.binary_cross_entropy(probs, labels)


def _negative_slab(store: ClipStore, clip_index: int, t: int,
                   rng: np.random.Generator) -> np.ndarray:
    clip = store.clips[clip_index]
    max_start = clip.n_frames - WINDOW_FRAMES
    offset_candidates = [s for s in range(max_start + 1)
                         if abs(s - t) >= NEGATIVE_MIN_OFFSET]
    use_offset = bool(rng.integers(2)) if len(store) > 1 else True
    if use_offset and offset_candidates:
        s = offset_candidates[int(rng.integers(len(offset_candidates)))]
        return mel_slab(clip.mel, s)
    others = [i for i in range(len(store)) if i != clip_index]
    if not others:
        raise DataError(
            "cannot build negative pairs: single clip with no room for a "
            f">= {NEGATIVE_MIN_OFFSET}-frame offset")
    other = store.clips[others[int(rng.integers(len(others)))]]
    s = int(rng.integers(other.n_frames - WINDOW_FRAMES + 1))
    return mel_slab(other.mel, s)


def clip_alignment_scores(model: SyncNet, store: ClipStore, seed: int,
                          pairs_per_clip: int = 2
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Aligned/misaligned cosine scores with labels, for ROC evaluation."""
    rng = np.random.default_rng(seed)
    scores: list[float] = []
    labels: list[int] = []
    model.eval()
    with torch.no_grad():
        for clip_index, clip in enumerate(store.clips):
            for _ in range(pairs_per_clip):
                t = int(rng.integers(clip.n_frames - WINDOW_FRAMES + 1))
                window = lower_half_window(
                    clip.frames_f32(np.arange(t, t + WINDOW_FRAMES)), 0)
                for positive in (True, False):
                    slab = mel_slab(clip.mel, t) if positive \
                        else _negative_slab(store, clip_index, t, rng)
                    cos = model.score(
                        torch.from_numpy(window[None]).float(),
                        torch.from_numpy(slab[None]).float())
                    scores.append(float(cos.item()))
                    labels.append(int(positive))
    return np.asarray(scores), np.asarray(labels)


def sync_confidence(frames: np.ndarray, mel: np.ndarray, model: SyncNet,
                    max_offset: int = 15) -> float:
    """Offset-search confidence: mean over windows of (max - mean) cosine.

    ``frames`` [T, S, S, 3] must satisfy T >= 5 + 2 * max_offset so that all
    probed offsets produce valid slabs.  Constant embeddings give exactly 0.
    """
    frames = np.asarray(frames)
    n_frames = frames.shape[0]
    min_len = WINDOW_FRAMES + 2 * max_offset
    if n_frames < min_len:
        raise DataError(
            f"sync confidence needs at least {min_len} frames "
            f"(got {n_frames}) for offsets +-{max_offset}")
    starts = np.arange(max_offset, n_frames - WINDOW_FRAMES - max_offset + 1)
    slab_indices = np.arange(0, n_frames - WINDOW_FRAMES + 1)

    model.eval()
    with torch.no_grad():
        windows = np.stack([lower_half_window(frames, int(t)) for t in starts])
        visual = model.visual_embed(torch.from_numpy(windows).float())
        slabs = np.stack([mel_slab(mel, int(s)) for s in slab_indices])
        audio = model.audio_embed(torch.from_numpy(slabs).float())

        visual = visual / visual.norm(dim=1, keepdim=True).clamp_min(1e-12)
        audio = audio / audio.norm(dim=1, keepdim=True).clamp_min(1e-12)
        table = visual @ audio.T  # [n_windows, n_slabs]

        confidences = []
        for row, t in enumerate(starts):
            columns = np.arange(t - max_offset, t + max_offset + 1)
            cosines = table[row, torch.from_numpy(columns)]
            confidences.append(float(cosines.max() - cosines.mean()))
    return float(np.mean(confidences))
