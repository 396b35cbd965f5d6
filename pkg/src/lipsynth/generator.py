"""Style-modulated inpainting generator.

A constant 4x4 seed is refined by pairs of 3x3 modulated convolutions, one
pair per resolution, up to the image size (depth L = 2*log2(S) - 2).  Each
layer l:

* upsamples 2x (nearest) when it opens a new resolution;
* scales input channels by a style s = affine_l(w + dw_l), applies the
  convolution, and demodulates by 1/sqrt(sum s'^2 + 1e-8) per output
  channel, so the output is invariant to the overall style scale;
* injects the matching masked pyramid entry through a learned 1x1
  projection where unconditional synthesis would add random noise --
  spatial conditioning rides the noise slot;
* adds a bias and applies leaky ReLU.

Per-resolution toRGB taps (1x1 modulated conv, no demodulation) accumulate
into a skip image that is upsampled alongside; the final image is squashed
to [0, 1].  The per-layer style offsets ``dw_l`` span an extended style
space used by personalization; ``delta`` overlays additive parameter
offsets without mutating the module, so a base model stays frozen while a
personal overlay is optimized or applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.func import functional_call

from .encoders import (
    FeaturePyramid,
    channel_schedule,
    layer_resolutions,
    num_style_layers,
)
from .errors import ValidationError

MODULATION_EPS = 1e-8


def modulated_conv2d(x: torch.Tensor, weight: torch.Tensor, styles: torch.Tensor,
                     demodulate: bool = True, eps: float = MODULATION_EPS
                     ) -> torch.Tensor:
    """Per-sample style-modulated convolution.

    ``x`` is [B, I, H, W], ``weight`` [O, I, kh, kw], ``styles`` [B, I].
    The batch dimension is folded into groups so every sample sees its own
    modulated kernel in one conv call.
    """
    if x.ndim != 4 or weight.ndim != 4 or styles.ndim != 2:
        raise ValidationError("modulated_conv2d expects 4-D x, 4-D weight, 2-D styles")
    batch, in_ch, height, width = x.shape
    out_ch, w_in, kh, kw = weight.shape
    if w_in != in_ch or styles.shape != (batch, in_ch):
        raise ValidationError(
            f"shape mismatch: x {tuple(x.shape)}, weight {tuple(weight.shape)}, "
            f"styles {tuple(styles.shape)}")
    if not torch.isfinite(styles).all():
        raise ValidationError("styles contain non-finite values")

    w = weight.unsqueeze(0) * styles.reshape(batch, 1, in_ch, 1, 1)
    if demodulate:
        denom = torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4)) + eps)
        w = w * denom.reshape(batch, out_ch, 1, 1, 1)
    out = F.conv2d(
        x.reshape(1, batch * in_ch, height, width),
        w.reshape(batch * out_ch, in_ch, kh, kw),
        padding=(kh // 2, kw // 2),
        groups=batch,
    )
    return out.reshape(batch, out_ch, out.shape[-2], out.shape[-1])


@dataclass
class StyleState:
    """Joint style w plus optional per-layer offsets (the extended space).

    ``deltas`` holds one [B, d_w] offset per generator layer; layer l uses
    w + deltas[l-1].  ``None`` means the plain replicated style.
    """

    w: torch.Tensor
    deltas: list[torch.Tensor] | None = None

    def __post_init__(self) -> None:
        if self.w.ndim != 2:
            raise ValidationError(f"style w must be [B, d_w], got {tuple(self.w.shape)}")
        if self.deltas is not None:
            for index, delta in enumerate(self.deltas):
                if delta.shape != self.w.shape:
                    raise ValidationError(
                        f"style delta {index} has shape {tuple(delta.shape)}, "
                        f"expected {tuple(self.w.shape)}")

    def layer_style(self, index: int) -> torch.Tensor:
        if self.deltas is None:
            return self.w
        return self.w + self.deltas[index]


class GenLayer(nn.Module):
    def __init__(self, style_dim: int, in_ch: int, out_ch: int, pyramid_ch: int,
                 upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.ones_(self.affine.bias)  # neutral modulation at init
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3)
                                   * (in_ch * 9) ** -0.5)
        self.feature_proj = nn.Conv2d(pyramid_ch, out_ch, 1, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: torch.Tensor, style: torch.Tensor,
                feature: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        out = modulated_conv2d(x, self.weight, self.affine(style))
        out = out + self.feature_proj(feature)
        return F.leaky_relu(out + self.bias.reshape(1, -1, 1, 1), 0.2)


class ToRGB(nn.Module):
    def __init__(self, style_dim: int, in_ch: int):
        super().__init__()
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(3, in_ch, 1, 1) * in_ch ** -0.5)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        out = modulated_conv2d(x, self.weight, self.affine(style), demodulate=False)
        return out + self.bias.reshape(1, -1, 1, 1)


class Generator(nn.Module):
    """Pyramid- and style-conditioned image synthesis."""

    def __init__(self, image_size: int, style_dim: int,
                 pyramid_channels: dict[int, int], base: int = 32,
                 cap: int = 256, mapping_layers: int = 0):
        super().__init__()
        self.image_size = image_size
        self.style_dim = style_dim
        self.depth = num_style_layers(image_size)
        self.resolutions = layer_resolutions(image_size)
        widths = channel_schedule(image_size, base, cap)

        self.mapping = nn.ModuleList()
        for _ in range(mapping_layers):
            self.mapping.append(nn.Linear(style_dim, style_dim))

        self.const = nn.Parameter(torch.randn(widths[4], 4, 4))
        layers = []
        rgbs = []
        previous = widths[4]
        for index, res in enumerate(self.resolutions):
            upsample = index > 0 and res != self.resolutions[index - 1]
            layers.append(GenLayer(
                style_dim, previous, widths[res], pyramid_channels[res], upsample))
            previous = widths[res]
            if index % 2 == 1:
                rgbs.append(ToRGB(style_dim, widths[res]))
        self.layers = nn.ModuleList(layers)
        self.rgbs = nn.ModuleList(rgbs)

    def forward(self, pyramid: FeaturePyramid, style: StyleState,
                delta: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        if delta is not None:
            merged = dict(self.named_parameters())
            for name, offset in delta.items():
                if name not in merged:
                    raise ValidationError(f"overlay names unknown parameter '{name}'")
                if offset.shape != merged[name].shape:
                    raise ValidationError(
                        f"overlay for '{name}' has shape {tuple(offset.shape)}, "
                        f"parameter is {tuple(merged[name].shape)}")
                merged[name] = merged[name] + offset
            return functional_call(self, merged, (pyramid, style))

        if not pyramid.masked:
            raise ValidationError(
                "feature pyramid must go through mask_pyramid before synthesis")
        if pyramid.depth != self.depth:
            raise ValidationError(
                f"pyramid depth {pyramid.depth} != generator depth {self.depth}")
        if style.w.shape[1] != self.style_dim:
            raise ValidationError(
                f"style dim {style.w.shape[1]} != generator style dim {self.style_dim}")
        if style.deltas is not None and len(style.deltas) != self.depth:
            raise ValidationError(
                f"expected {self.depth} per-layer style offsets, got {len(style.deltas)}")
        batch = style.w.shape[0]
        if pyramid.maps[0].shape[0] != batch:
            raise ValidationError("pyramid batch size does not match style batch size")

        if self.mapping:
            mapped = style.w
            for linear in self.mapping:
                mapped = F.leaky_relu(linear(mapped), 0.2)
            style = StyleState(w=mapped, deltas=style.deltas)

        x = self.const.unsqueeze(0).expand(batch, -1, -1, -1)
        image = None
        for index, layer in enumerate(self.layers):
            layer_style = style.layer_style(index)
            x = layer(x, layer_style, pyramid.maps[index])
            if index % 2 == 1:
                rgb = self.rgbs[index // 2](x, layer_style)
                if image is None:
                    image = rgb
                else:
                    image = rgb + F.interpolate(image, scale_factor=2, mode="nearest")
        return 0.5 * (torch.tanh(image) + 1.0)

    # -- parameter overlays ------------------------------------------------

    def overlay_parameter_names(self, widen_scope: bool = False) -> list[str]:
        """Parameters an additive overlay may touch.

        The constant input is excluded by default: it is the spatial seed
        every identity shares, and offsets there amount to repainting the
        canvas rather than adapting style/texture.  ``widen_scope`` lifts
        the exclusion for experiments.
        """
        names = [name for name, _ in self.named_parameters()]
        if not widen_scope:
            names = [name for name in names if name != "const"]
        return names

    def validate_delta(self, delta: dict[str, torch.Tensor],
                       widen_scope: bool = False) -> None:
        allowed = set(self.overlay_parameter_names(widen_scope))
        params = dict(self.named_parameters())
        for name, offset in delta.items():
            if name not in params:
                raise ValidationError(f"overlay names unknown parameter '{name}'")
            if name not in allowed:
                raise ValidationError(f"parameter '{name}' is outside the overlay scope")
            if offset.shape != params[name].shape:
                raise ValidationError(
                    f"overlay for '{name}' has shape {tuple(offset.shape)}, "
                    f"parameter is {tuple(params[name].shape)}")


@dataclass
class GeneratorParams:
    """A generator's parameters plus an optional additive overlay."""

    base: dict[str, torch.Tensor]
    delta: dict[str, torch.Tensor] | None = None

    def effective(self) -> dict[str, torch.Tensor]:
        if self.delta is None:
            return dict(self.base)
        merged = dict(self.base)
        for name, offset in self.delta.items():
            if name not in merged:
                raise ValidationError(f"overlay names unknown parameter '{name}'")
            merged[name] = merged[name] + offset
        return merged


def apply_overlay(generator: Generator, delta: dict[str, torch.Tensor],
                  widen_scope: bool = False) -> GeneratorParams:
    generator.validate_delta(delta, widen_scope)
    return GeneratorParams(base=dict(generator.named_parameters()), delta=dict(delta))


@dataclass
class Backbone:
    """The trainable conditional synthesis stack (no discriminator)."""

    face_encoder: "object"
    audio_encoder: "object"
    generator: Generator
    style_dim: int

    def modules_by_name(self) -> dict[str, nn.Module]:
        return {
            "encoder_face": self.face_encoder,
            "encoder_audio": self.audio_encoder,
            "generator": self.generator,
        }

    def eval(self) -> "Backbone":
        for module in self.modules_by_name().values():
            module.eval()
        return self

    def parameters(self):
        for module in self.modules_by_name().values():
            yield from module.parameters()


def build_backbone(config, seed: int | None = None) -> Backbone:
    """Construct encoders and generator with consistent shapes.

    Seeding here pins the parameter initialization; two backbones built from
    the same config and seed are bit-identical.
    """
    from .encoders import AudioEncoder, FaceEncoder

    if seed is not None:
        torch.manual_seed(seed)
    face = FaceEncoder(config.image_size, config.d_face,
                       base=config.enc_base, cap=config.enc_max)
    audio = AudioEncoder(config.d_audio)
    style_dim = config.d_audio + (config.d_face if config.use_face_style else 0)
    generator = Generator(
        config.image_size, style_dim,
        pyramid_channels=channel_schedule(config.image_size, config.enc_base,
                                          config.enc_max),
        base=config.gen_base, cap=config.gen_max,
        mapping_layers=config.mapping_layers)
    return Backbone(face_encoder=face, audio_encoder=audio,
                    generator=generator, style_dim=style_dim)


def blend_into_frame(generated: np.ndarray, original: np.ndarray,
                     crop_box: tuple[int, int, int, int] | None = None,
                     feather_px: int = 0) -> np.ndarray:
    """Paste ``generated`` into ``original`` at ``crop_box`` with a linear
    alpha ramp of width ``feather_px`` from each crop edge.

    ``crop_box`` is (y0, x0, y1, x1), end-exclusive; default is the full
    frame.  With feathering, alpha is min(d / feather_px, 1) where d is the
    pixel's distance to the nearest crop edge, so the boundary row equals
    the original exactly and the midpoint of the ramp mixes 50/50.  Pixels
    outside the crop are returned bit-identical.
    """
    generated = np.asarray(generated, dtype=np.float32)
    original = np.asarray(original, dtype=np.float32)
    if generated.ndim != 3 or original.ndim != 3:
        raise ValidationError("blend expects [H, W, 3] images")
    if feather_px < 0:
        raise ValidationError("feather_px must be non-negative")
    if crop_box is None:
        crop_box = (0, 0, original.shape[0], original.shape[1])
    y0, x0, y1, x1 = crop_box
    if not (0 <= y0 < y1 <= original.shape[0] and 0 <= x0 < x1 <= original.shape[1]):
        raise ValidationError(f"crop box {crop_box} outside original {original.shape}")
    if generated.shape[:2] != (y1 - y0, x1 - x0):
        raise ValidationError(
            f"generated {generated.shape[:2]} does not fit crop box "
            f"{(y1 - y0, x1 - x0)}")

    height, width = y1 - y0, x1 - x0
    if feather_px == 0:
        alpha = np.ones((height, width), dtype=np.float32)
    else:
        rows = np.arange(height, dtype=np.float32)
        cols = np.arange(width, dtype=np.float32)
        dist = np.minimum.outer(np.minimum(rows, height - 1 - rows),
                                np.minimum(cols, width - 1 - cols))
        alpha = np.minimum(dist / feather_px, 1.0).astype(np.float32)

    out = original.copy()
    region = out[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = alpha[:, :, None] * generated + (1.0 - alpha[:, :, None]) * region
    return out
