"""Generalized backbone training: losses, discriminator, reconstruction loop.

One step samples ``batch_windows`` windows of 5 consecutive frames plus one
reference frame per window drawn from the same clip but outside the window
(any frame when the clip is exactly 5 long).  The masked targets and the
replicated reference form the 6-channel encoder input; each frame is
generated from its own audio slab.  The discriminator then takes a
non-saturating logistic step on real vs detached fakes (R1 on the real
batch every ``r1_interval`` steps), and the encoders and generator take one
step on

    total = l_adv_g + lambda_rec * l_rec + lambda_sync * l_sync

where l_rec is L1 plus per-tap feature L1 and l_sync is the negative
window/slab cosine under the frozen sync scorer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .clipio import ClipStore
from .config import RunConfig
from .encoders import build_style, channel_schedule, mask_pyramid
from .errors import TrainingError, ValidationError
from .generator import Backbone, StyleState, build_backbone
from .melspec import mel_slab
from .syncnet import (
    WINDOW_FRAMES,
    SyncNet,
    freeze_module,
    state_bytes,
    sync_cosine,
)
from .toyface import build_umask

PERCEPTUAL_SEED = 101
MAX_PERCEPTUAL_TAPS = 4
LOGIT_CLAMP = 30.0


class PerceptualExtractor(nn.Module):
    """Frozen random conv stack standing in for a pretrained feature net.

    Each tap halves resolution; the reconstruction loss compares features at
    every tap.  Random frozen features preserve the multi-scale structure of
    a perceptual loss without an external weight dependency; a pretrained
    extractor exposing the same list-of-taps interface can be swapped in.

    Construction reseeds the global torch RNG (fixed internal seed) so the
    surrogate is identical across runs regardless of config seed.
    """

    def __init__(self, n_taps: int, image_size: int):
        super().__init__()
        if not 0 <= n_taps <= MAX_PERCEPTUAL_TAPS:
            raise ValidationError(
                f"perceptual taps must be in [0, {MAX_PERCEPTUAL_TAPS}], "
                f"got {n_taps}")
        if image_size // (2 ** n_taps) < 1:
            raise ValidationError(
                f"image size {image_size} too small for {n_taps} taps")
        self.n_taps = n_taps
        torch.manual_seed(PERCEPTUAL_SEED)
        convs = []
        previous = 3
        width = 16
        for _ in range(n_taps):
            convs.append(nn.Conv2d(previous, width, 3, stride=2, padding=1))
            previous = width
            width = min(2 * width, 64)
        self.convs = nn.ModuleList(convs)
        freeze_module(self)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValidationError(
                f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        taps = []
        x = images
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
        return taps


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor,
                        extractor: Callable | None = None) -> torch.Tensor:
    """Mean absolute pixel error plus mean absolute error at each tap."""
    if pred.shape != target.shape:
        raise ValidationError(
            f"prediction shape {tuple(pred.shape)} != target shape "
            f"{tuple(target.shape)}")
    loss = (pred - target).abs().mean()
    if extractor is not None:
        for tap_pred, tap_target in zip(extractor(pred), extractor(target)):
            loss = loss + (tap_pred - tap_target).abs().mean()
    return loss


class DiscriminatorBlock(nn.Module):
    """Residual downsampling block; the skip path is a strided 1x1 conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, out_channels, 3, stride=2,
                               padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=2,
                              bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.leaky_relu(self.conv1(x), 0.2)
        y = F.leaky_relu(self.conv2(y), 0.2)
        return (y + self.skip(x)) / math.sqrt(2.0)


class Discriminator(nn.Module):
    def __init__(self, image_size: int, base: int = 32, cap: int = 256):
        super().__init__()
        channels = channel_schedule(image_size, base, cap)
        self.image_size = image_size
        self.from_rgb = nn.Conv2d(3, channels[image_size], 1)
        blocks = []
        res = image_size
        while res > 4:
            blocks.append(DiscriminatorBlock(channels[res], channels[res // 2]))
            res //= 2
        self.blocks = nn.ModuleList(blocks)
        self.final_conv = nn.Conv2d(channels[4], channels[4], 3, padding=1)
        self.final_dense = nn.Linear(channels[4] * 16, channels[4])
        self.final_logit = nn.Linear(channels[4], 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1:] != (3, self.image_size,
                                                    self.image_size):
            raise ValidationError(
                f"expected [B, 3, {self.image_size}, {self.image_size}] "
                f"images, got {tuple(images.shape)}")
        # contiguous() guards the R1 double-backward against this torch
        # build's crash on non-contiguous conv inputs
        x = F.leaky_relu(self.from_rgb(images.contiguous()), 0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(x), 0.2)
        x = F.leaky_relu(self.final_dense(x.flatten(1)), 0.2)
        return self.final_logit(x).squeeze(1)


def d_logistic_loss(real_logits: torch.Tensor,
                    fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator side of the non-saturating logistic objective."""
    return (F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean())


def g_nonsaturating_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def r1_penalty(discriminator: nn.Module, real_images: torch.Tensor,
               gamma: float) -> torch.Tensor:
    """(gamma / 2) * E[ |grad_real D|^2 ] on a fresh leaf copy of the batch."""
    real = real_images.detach().requires_grad_(True)
    logits = discriminator(real)
    grad, = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return (gamma / 2.0) * grad.pow(2).sum(dim=(1, 2, 3)).mean()


def sync_loss(model: SyncNet, frames: torch.Tensor,
              slab: torch.Tensor) -> torch.Tensor:
    """Negative cosine between the 5-frame lower-half window and its slab.

    ``frames`` is [5, 3, S, S] (one generated window, channel-first);
    ``slab`` is [1, 80, 16] aligned with the window's first frame.
    """
    if frames.ndim != 4 or frames.shape[0] != WINDOW_FRAMES:
        raise ValidationError(
            f"sync loss needs [{WINDOW_FRAMES}, 3, S, S] frames, "
            f"got {tuple(frames.shape)}")
    size = frames.shape[-1]
    window = frames.permute(0, 2, 3, 1)[None, :, size // 2:, :, :]
    return -sync_cosine(model.visual_embed(window),
                        model.audio_embed(slab)).mean()


@dataclass
class LossBreakdown:
    """One step's logged components; ``total_g`` is recomputed from the
    logged floats so the decomposition is exact in double precision."""

    step: int
    l_rec: float
    l_adv_g: float
    l_adv_d: float
    l_sync: float
    lambda_rec: float
    lambda_sync: float

    @property
    def total_g(self) -> float:
        return (self.l_adv_g + self.lambda_rec * self.l_rec
                + self.lambda_sync * self.l_sync)

    def finite(self) -> bool:
        values = (self.l_rec, self.l_adv_g, self.l_adv_d, self.l_sync)
        return all(math.isfinite(v) for v in values)

    TSV_HEADER = "step\tl_rec\tl_adv_g\tl_adv_d\tl_sync\ttotal_g"

    def tsv_line(self) -> str:
        return (f"{self.step}\t{self.l_rec:.9e}\t{self.l_adv_g:.9e}\t"
                f"{self.l_adv_d:.9e}\t{self.l_sync:.9e}\t{self.total_g:.9e}")


@dataclass
class TrainResult:
    backbone: Backbone
    discriminator: Discriminator
    history: list[LossBreakdown] = field(repr=False)
    config: RunConfig = field(repr=False, default=None)


def sample_window(clip, rng: np.random.Generator) -> tuple[int, int]:
    """Window start and a reference index outside the window.

    Clips of exactly 5 frames have no outside frame; the reference then
    falls inside the window (documented fallback).
    """
    start = int(rng.integers(clip.n_frames - WINDOW_FRAMES + 1))
    outside = [i for i in range(clip.n_frames)
               if i < start or i >= start + WINDOW_FRAMES]
    if outside:
        reference = outside[int(rng.integers(len(outside)))]
    else:
        reference = int(rng.integers(clip.n_frames))
    return start, reference


def _window_tensors(clip, start: int, reference: int, keep: torch.Tensor
                    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor,
                               torch.Tensor]:
    """(targets, masked targets, replicated reference, slabs) for a window.

    Tensors are made contiguous at creation: this torch build's CPU conv
    backward corrupts memory on non-contiguous numpy-backed inputs.
    """
    frames = clip.frames_f32(np.arange(start, start + WINDOW_FRAMES))
    targets = torch.from_numpy(frames).permute(0, 3, 1, 2).contiguous()
    masked = targets * keep
    ref = torch.from_numpy(clip.frame_f32(reference)).permute(2, 0, 1)
    ref = ref.unsqueeze(0).repeat(WINDOW_FRAMES, 1, 1, 1)
    slabs = torch.from_numpy(np.stack(
        [mel_slab(clip.mel, start + j) for j in range(WINDOW_FRAMES)]))
    return targets, masked, ref, slabs


def generate_window(backbone: Backbone, masked: torch.Tensor,
                    reference: torch.Tensor, slabs: torch.Tensor,
                    config: RunConfig) -> torch.Tensor:
    """Encode one window's inputs and synthesize its 5 frames."""
    pyramid, face_style = backbone.face_encoder(masked, reference)
    audio_style = backbone.audio_encoder(slabs)
    style = build_style(audio_style, face_style, config.use_face_style)
    mask = build_umask(config.image_size)
    gated = mask_pyramid(pyramid, mask, enabled=config.mask_enabled)
    return backbone.generator(gated, StyleState(style))


def train_generalized(store: ClipStore, config: RunConfig,
                      syncnet: SyncNet | None = None,
                      discriminator: Discriminator | None = None,
                      log_stream: TextIO | None = None,
                      on_checkpoint: Callable[[TrainResult, int, str], None]
                      | None = None) -> TrainResult:
    """Self-reconstruction training of encoders, generator, discriminator.

    The sync scorer, when given, is frozen and byte-verified unchanged at
    the end.  ``on_checkpoint(result, step, reason)`` fires every
    ``checkpoint_interval`` steps and once more on a non-finite-loss abort;
    the final state is returned, not checkpointed.  Deterministic for a
    fixed config and seed under single-threaded execution.
    """
    store.require_min_frames(WINDOW_FRAMES)
    if config.lambda_sync > 0 and syncnet is None:
        raise TrainingError(
            "lambda_sync > 0 requires a trained sync scorer; pass one or "
            "set lambda_sync 0")
    if store.size != config.image_size:
        raise ValidationError(
            f"dataset frames are {store.size}x{store.size} but config "
            f"image_size is {config.image_size}")
    if config.threads > 0:
        torch.set_num_threads(config.threads)

    # Fixed-seed surrogate first: later construction draws from config.seed.
    extractor = PerceptualExtractor(config.n_perceptual, config.image_size)
    backbone = build_backbone(config, config.seed)
    if discriminator is None:
        discriminator = Discriminator(config.image_size, config.disc_base,
                                      config.disc_max)
        if config.d_init_weights:
            from .checkpoint import load_container, load_module_arrays
            container = load_container(config.d_init_weights,
                                       kind="discriminator")
            load_module_arrays(discriminator, container, "discriminator")
    sync_before = b""
    if syncnet is not None:
        freeze_module(syncnet)
        sync_before = state_bytes(syncnet)

    g_params = (list(backbone.generator.parameters())
                + list(backbone.face_encoder.parameters())
                + list(backbone.audio_encoder.parameters()))
    optimizer_g = torch.optim.Adam(
        [{"params": list(backbone.generator.parameters()),
          "lr": config.lr_gen},
         {"params": (list(backbone.face_encoder.parameters())
                     + list(backbone.audio_encoder.parameters())),
          "lr": config.lr_enc}],
        betas=(config.adam_beta1, config.adam_beta2))
    optimizer_d = torch.optim.Adam(discriminator.parameters(),
                                   lr=config.lr_disc,
                                   betas=(config.adam_beta1,
                                          config.adam_beta2))

    rng = np.random.default_rng(config.seed + 1)
    mask = build_umask(config.image_size)
    keep = torch.from_numpy(
        (1 - mask.values).astype(np.float32))[None, None, :, :]
    history: list[LossBreakdown] = []
    result = TrainResult(backbone=backbone, discriminator=discriminator,
                         history=history, config=config)
    if log_stream is not None:
        print(LossBreakdown.TSV_HEADER, file=log_stream)

    for step in range(config.steps):
        windows = []
        for _ in range(config.batch_windows):
            clip = store.clips[int(rng.integers(len(store)))]
            start, reference = sample_window(clip, rng)
            targets, masked, ref, slabs = _window_tensors(
                clip, start, reference, keep)
            windows.append((clip, start, targets, masked, ref, slabs))

        fakes = [generate_window(backbone, masked, ref, slabs, config)
                 for _, _, _, masked, ref, slabs in windows]
        fake_batch = torch.cat(fakes, dim=0)
        real_batch = torch.cat([t for _, _, t, _, _, _ in windows], dim=0)

        l_adv_d = 0.0
        if config.adversarial:
            d_loss = d_logistic_loss(discriminator(real_batch),
                                     discriminator(fake_batch.detach()))
            d_total = d_loss
            if config.r1_gamma > 0 and step % config.r1_interval == 0:
                d_total = d_total + r1_penalty(discriminator, real_batch,
                                               config.r1_gamma)
            if not torch.isfinite(d_total):
                _abort(result, step, on_checkpoint, "discriminator loss")
            optimizer_d.zero_grad()
            d_total.backward()
            if config.grad_clip > 0:
                nn.utils.clip_grad_norm_(discriminator.parameters(),
                                         config.grad_clip)
            optimizer_d.step()
            l_adv_d = float(d_loss.detach())

        l_rec = reconstruction_loss(fake_batch, real_batch, extractor)
        zero = torch.zeros(())
        l_adv_g = (g_nonsaturating_loss(discriminator(fake_batch))
                   if config.adversarial else zero)
        l_sync = zero
        sync_weight = 0.0
        if syncnet is not None:
            # Scoring raw early-training output rewards textures that game
            # the scorer; hold the term out until the face has formed.
            sync_weight = (config.lambda_sync
                           if step >= config.sync_start else 0.0)
            if sync_weight > 0:
                l_sync = _batched_sync_loss(syncnet, fakes, windows, keep)
            else:
                with torch.no_grad():
                    l_sync = _batched_sync_loss(syncnet, fakes, windows,
                                                keep)
        total = (l_adv_g + config.lambda_rec * l_rec
                 + sync_weight * l_sync)
        if not torch.isfinite(total):
            _abort(result, step, on_checkpoint, "generator loss")
        optimizer_g.zero_grad()
        total.backward()
        # One outsized step can drive the output tanh into full saturation,
        # where gradients vanish exactly and training never recovers.
        if config.grad_clip > 0:
            nn.utils.clip_grad_norm_(g_params, config.grad_clip)
        optimizer_g.step()

        breakdown = LossBreakdown(
            step=step, l_rec=float(l_rec.detach()),
            l_adv_g=float(l_adv_g.detach()), l_adv_d=l_adv_d,
            l_sync=float(l_sync.detach()),
            lambda_rec=config.lambda_rec, lambda_sync=config.lambda_sync)
        history.append(breakdown)
        if log_stream is not None and step % config.log_interval == 0:
            print(breakdown.tsv_line(), file=log_stream)
        if (on_checkpoint is not None and config.checkpoint_interval > 0
                and (step + 1) % config.checkpoint_interval == 0):
            on_checkpoint(result, step + 1, "interval")

    if syncnet is not None and state_bytes(syncnet) != sync_before:
        raise TrainingError("sync scorer parameters changed during training")
    return result


def _batched_sync_loss(syncnet: SyncNet, fakes: Sequence[torch.Tensor],
                       windows, keep: torch.Tensor) -> torch.Tensor:
    """Sync loss on composited windows, as the pipeline emits them.

    The scorer sees the generated pixels only inside the inpainting mask,
    pasted into the real frames.  Scoring raw generator output instead lets
    the gradient push face regions the reconstruction loss owns, and gives
    the frozen scorer off-manifold input everywhere at once, which early
    training exploits (washed-out mouths that game the score).
    """
    losses = []
    for fake, (clip, start, targets, *_) in zip(fakes, windows):
        composite = targets * keep + fake * (1.0 - keep)
        losses.append(sync_loss(
            syncnet, composite,
            torch.from_numpy(mel_slab(clip.mel, start))[None]))
    return torch.stack(losses).mean()


def _abort(result: TrainResult, step: int, on_checkpoint, which: str):
    suffix = ""
    if on_checkpoint is not None:
        on_checkpoint(result, step, "abort")
        suffix = "; state checkpointed"
    raise TrainingError(f"non-finite {which} at step {step}{suffix}")
