"""Face and audio encoders producing styles and the spatial feature pyramid.

The face encoder consumes the masked target frame and a reference frame of
the same identity (channel-concatenated) and emits:

* a feature pyramid with two entries per resolution from 4x4 up to the full
  image, aligned with the generator's layer ladder (coarse to fine, two
  style-conv layers per resolution, so depth L = 2*log2(S) - 2);
* a face style vector ``f_f`` read off the coarsest activations.

Before the pyramid may condition the generator it must pass through
:func:`mask_pyramid`, which zeroes hidden spatial positions of the finer
half of the entries (pyramid levels l > floor(L/2), 1-based).  Coarse
entries and the style vector pass through unchanged: identity at low
spatial frequency is kept, while fine detail of the hidden region cannot
leak through.  Disabling the gating (`enabled=False`) marks the pyramid as
processed without touching values; that variant exists only for ablations.

The audio encoder maps an 80x16 log-mel slab to the audio style ``f_a``.
Inputs are only globally rescaled (never shifted), so an all-zero input
with zero biases produces an exactly zero embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError
from .toyface import UMask, downsample_mask

MEL_INPUT_SCALE = 0.125  # tames raw log-mel magnitudes (about +-11) to order 1


def num_style_layers(image_size: int) -> int:
    """Pyramid/style ladder depth: L = 2*log2(S) - 2 (two layers per res)."""
    if image_size < 8 or image_size & (image_size - 1) != 0:
        raise ValidationError(f"image_size must be a power of two >= 8, got {image_size}")
    return 2 * int(math.log2(image_size)) - 2


def layer_resolutions(image_size: int) -> list[int]:
    """Per-layer output resolution, 4,4,8,8,...,S,S (1-based layer l uses
    index l-1)."""
    depth = num_style_layers(image_size)
    return [4 * 2 ** ((l - 1) // 2) for l in range(1, depth + 1)]


def channel_schedule(image_size: int, base: int, cap: int) -> dict[int, int]:
    """Conv widths per resolution: ``base`` at full size, doubling as the
    resolution halves, capped at ``cap``."""
    num_style_layers(image_size)  # validates the size
    schedule = {}
    res = image_size
    width = base
    while res >= 4:
        schedule[res] = min(width, cap)
        res //= 2
        width *= 2
    return schedule


@dataclass
class FeaturePyramid:
    """Spatial skip features, coarse to fine, two entries per resolution.

    ``masked`` records whether :func:`mask_pyramid` has been applied; the
    generator refuses pyramids that have not been through it.
    """

    maps: list[torch.Tensor] = field(repr=False)
    masked: bool = False

    def __post_init__(self) -> None:
        if not self.maps:
            raise ValidationError("feature pyramid has no entries")
        batch = self.maps[0].shape[0]
        for index, entry in enumerate(self.maps):
            expected = 4 * 2 ** (index // 2)
            if entry.ndim != 4 or entry.shape[0] != batch:
                raise ValidationError(
                    f"pyramid entry {index} has shape {tuple(entry.shape)}; "
                    f"expected 4-D with batch {batch}")
            if entry.shape[2] != expected or entry.shape[3] != expected:
                raise ValidationError(
                    f"pyramid entry {index} is {entry.shape[2]}x{entry.shape[3]}, "
                    f"expected {expected}x{expected}")

    @property
    def depth(self) -> int:
        return len(self.maps)

    @property
    def image_size(self) -> int:
        return self.maps[-1].shape[-1]


def mask_pyramid(pyramid: FeaturePyramid, mask: UMask, enabled: bool = True) -> FeaturePyramid:
    """Zero hidden positions in the finer half of the pyramid.

    Entries with 1-based index l > floor(L/2) are multiplied by the
    center-downsampled keep-map (1 - M); the coarse half passes through.
    Applying the op twice is rejected, so a pyramid cannot silently skip or
    repeat the gating.
    """
    if pyramid.masked:
        raise ValidationError("feature pyramid is already masked")
    if pyramid.image_size != mask.size:
        raise ValidationError(
            f"mask size {mask.size} does not match pyramid image size "
            f"{pyramid.image_size}")
    if not enabled:
        return FeaturePyramid(maps=list(pyramid.maps), masked=True)
    depth = pyramid.depth
    cutoff = depth // 2
    gated = []
    for index, entry in enumerate(pyramid.maps):
        if index + 1 > cutoff:
            res = entry.shape[-1]
            keep = 1 - downsample_mask(mask, res)
            keep_t = torch.from_numpy(keep.astype("float32")).to(entry.dtype)
            gated.append(entry * keep_t.reshape(1, 1, res, res))
        else:
            gated.append(entry)
    return FeaturePyramid(maps=gated, masked=True)


class FaceEncoder(nn.Module):
    """Masked frame + reference frame -> (feature pyramid, face style)."""

    def __init__(self, image_size: int, d_face: int, base: int = 32, cap: int = 256):
        super().__init__()
        self.image_size = image_size
        self.d_face = d_face
        self.resolutions = sorted(channel_schedule(image_size, base, cap))  # 4..S
        widths = channel_schedule(image_size, base, cap)
        self.stem = nn.Conv2d(6, widths[image_size], 3, padding=1)
        self.downs = nn.ModuleDict({
            str(res): nn.Conv2d(widths[res], widths[res // 2], 3, stride=2, padding=1)
            for res in self.resolutions[1:]
        })
        self.projections = nn.ModuleDict({
            f"{res}_{i}": nn.Conv2d(widths[res], widths[res], 1)
            for res in self.resolutions for i in (0, 1)
        })
        self.head = nn.Linear(widths[4] * 16, d_face)
        self.widths = widths

    def forward(self, masked: torch.Tensor, reference: torch.Tensor
                ) -> tuple[FeaturePyramid, torch.Tensor]:
        for name, frames in (("masked", masked), ("reference", reference)):
            if frames.ndim != 4 or frames.shape[1] != 3 \
                    or frames.shape[2] != self.image_size \
                    or frames.shape[3] != self.image_size:
                raise ValidationError(
                    f"{name} frames must be [B, 3, {self.image_size}, "
                    f"{self.image_size}], got {tuple(frames.shape)}")
        if masked.shape[0] != reference.shape[0]:
            raise ValidationError("masked and reference batch sizes differ")

        x = torch.cat([masked, reference], dim=1)
        activations = {self.image_size: F.leaky_relu(self.stem(x), 0.2)}
        for res in reversed(self.resolutions[1:]):
            activations[res // 2] = F.leaky_relu(
                self.downs[str(res)](activations[res]), 0.2)

        maps = []
        for res in self.resolutions:
            maps.append(self.projections[f"{res}_0"](activations[res]))
            maps.append(self.projections[f"{res}_1"](activations[res]))
        face_style = self.head(activations[4].flatten(1))
        return FeaturePyramid(maps=maps, masked=False), face_style


class AudioEncoder(nn.Module):
    """Log-mel slab [B, 80, 16] -> audio style [B, d_audio]."""

    def __init__(self, d_audio: int):
        super().__init__()
        self.d_audio = d_audio
        self.convs = nn.ModuleList([
            nn.Conv2d(1, 16, 3, stride=2, padding=1),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
        ])
        self.head = nn.Linear(64 * 5 * 1, d_audio)

    def forward(self, slabs: torch.Tensor) -> torch.Tensor:
        if slabs.ndim != 3 or slabs.shape[1] != 80 or slabs.shape[2] != 16:
            raise ValidationError(
                f"slabs must be [B, 80, 16], got {tuple(slabs.shape)}")
        x = slabs.unsqueeze(1) * MEL_INPUT_SCALE
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.flatten(1))


def build_style(audio_style: torch.Tensor, face_style: torch.Tensor,
                use_face_style: bool = True) -> torch.Tensor:
    """Joint style w: concat(f_a, f_f), or f_a alone when face style is off."""
    if audio_style.shape[0] != face_style.shape[0]:
        raise ValidationError("audio and face style batch sizes differ")
    if not use_face_style:
        return audio_style
    return torch.cat([audio_style, face_style], dim=1)
