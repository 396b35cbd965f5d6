"""Few-shot speaker adaptation: style offsets plus a generator overlay.

An adapter holds two trainable pieces on top of a frozen backbone: an MLP
mapping the face embedding to one style offset per generator layer, and an
additive offset for every in-scope generator parameter.  Both are
zero-initialized, so an untrained adapter reproduces the base model
exactly.  Adaptation runs a fixed number of epochs over the person's
5-frame windows, alternating one personal step and one general-data step,
with

    loss = l_adv_g + lambda_rec * l_rec + lambda_sync * l_sync
           + lambda_person * (mean_B sum |dw|^2 + sum |dP|^2)

where only the adapter (and the live discriminator) receive gradients.
The adapter learning rate follows a cosine ramp to zero; at very large
``lambda_person`` this drives both offset norms toward zero instead of
oscillating around the optimizer's step-size floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import torch
from torch import nn

from .clipio import ClipStore
from .config import RunConfig
from .encoders import build_style, mask_pyramid
from .errors import DataError, TrainingError, ValidationError
from .generator import Backbone, StyleState
from .syncnet import SyncNet, freeze_module, state_bytes
from .toyface import build_umask
from .training import (
    Discriminator,
    PerceptualExtractor,
    WINDOW_FRAMES,
    _window_tensors,
    d_logistic_loss,
    g_nonsaturating_loss,
    r1_penalty,
    reconstruction_loss,
    sample_window,
    sync_loss,
)
from .melspec import mel_slab

MIN_PERSONAL_SECONDS = 5.0

# nn.ParameterDict forbids dots in keys; generator parameter paths use them.
_KEY_DOT = "__"


def _encode_key(name: str) -> str:
    return name.replace(".", _KEY_DOT)


def _decode_key(key: str) -> str:
    return key.replace(_KEY_DOT, ".")


class PersonalAdapter(nn.Module):
    """Trainable personalization state bound to one backbone architecture.

    ``base_fingerprint`` records the architecture fingerprint of the
    backbone the adapter was built against; loading it onto a different
    architecture is rejected at the container level.
    """

    def __init__(self, backbone: Backbone, config: RunConfig,
                 person_id: str = ""):
        super().__init__()
        generator = backbone.generator
        self.person_id = person_id
        self.lambda_person = config.lambda_person
        self.widen_scope = config.widen_delta_scope
        self.base_fingerprint = config.arch_fingerprint()
        self.style_dim = backbone.style_dim
        self.depth = generator.depth
        d_face = config.d_face
        hidden = 2 * self.style_dim
        self.mlp = nn.Sequential(
            nn.Linear(d_face, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, self.depth * self.style_dim),
        )
        # zero output layer: a fresh adapter is the identity adaptation
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

        params = dict(generator.named_parameters())
        self.delta_p = nn.ParameterDict({
            _encode_key(name): nn.Parameter(torch.zeros_like(params[name]))
            for name in generator.overlay_parameter_names(self.widen_scope)})

    def overlay(self) -> dict[str, torch.Tensor]:
        """Generator-parameter offsets keyed by dotted parameter path."""
        return {_decode_key(key): value
                for key, value in self.delta_p.items()}

    def delta_norms(self) -> tuple[float, float]:
        """Frobenius norms (‖dW‖ of the MLP output map, ‖dP‖ of the overlay).

        The dW norm is measured structurally as the norm of the zero-input
        response plus weight map; callers wanting the data-dependent norm
        should measure ``predict_dw`` outputs on their own batch.
        """
        head = self.mlp[-1]
        with torch.no_grad():
            dw = math.sqrt(float((head.weight ** 2).sum()
                                 + (head.bias ** 2).sum()))
            dp = math.sqrt(sum(float((p ** 2).sum())
                               for p in self.delta_p.values()))
        return dw, dp


def predict_dw(adapter: PersonalAdapter, face_style: torch.Tensor
               ) -> list[torch.Tensor]:
    """Per-layer style offsets for a batch of face embeddings."""
    if face_style.ndim != 2:
        raise ValidationError(
            f"face embedding must be [B, d_face], got {tuple(face_style.shape)}")
    expected = adapter.mlp[0].in_features
    if face_style.shape[1] != expected:
        raise ValidationError(
            f"face embedding dim {face_style.shape[1]} != adapter input "
            f"{expected}")
    flat = adapter.mlp(face_style)
    per_layer = flat.view(face_style.shape[0], adapter.depth,
                          adapter.style_dim)
    return list(per_layer.unbind(dim=1))


def personal_regularizer(dw: list[torch.Tensor],
                         dp: dict[str, torch.Tensor] | None,
                         lambda_person: float) -> torch.Tensor:
    """lambda * (batch-mean of summed squared dw + summed squared dP).

    Averaging the style term over the batch keeps its scale independent of
    how many frames a window holds; with a single sample it reduces to the
    plain double sum.
    """
    total = torch.zeros((), dtype=torch.float64)
    if dw:
        stacked = torch.stack([layer.pow(2).sum(dim=1) for layer in dw])
        if not torch.isfinite(stacked).all():
            raise ValidationError("non-finite style offsets")
        total = total + stacked.sum(dim=0).mean().double()
    if dp:
        for value in dp.values():
            if not torch.isfinite(value).all():
                raise ValidationError("non-finite parameter offsets")
            total = total + value.pow(2).sum().double()
    return lambda_person * total


def adapted_window(backbone: Backbone, adapter: PersonalAdapter | None,
                   masked: torch.Tensor, reference: torch.Tensor,
                   slabs: torch.Tensor, config: RunConfig) -> torch.Tensor:
    """Generate a window through the (possibly absent) adapter.

    With ``adapter=None`` this is exactly the generalized forward pass; a
    zero-initialized adapter produces bit-identical output.
    """
    pyramid, face_style = backbone.face_encoder(masked, reference)
    audio_style = backbone.audio_encoder(slabs)
    style = build_style(audio_style, face_style, config.use_face_style)
    mask = build_umask(config.image_size)
    gated = mask_pyramid(pyramid, mask, enabled=config.mask_enabled)
    if adapter is None:
        return backbone.generator(gated, StyleState(style))
    deltas = predict_dw(adapter, face_style)
    return backbone.generator(gated, StyleState(style, deltas=deltas),
                              delta=adapter.overlay())


@dataclass
class PersonalStepRecord:
    step: int
    source: str  # "personal" or "general"
    l_rec: float
    l_adv_g: float
    l_adv_d: float
    l_sync: float
    l_reg: float

    TSV_HEADER = "step\tsource\tl_rec\tl_adv_g\tl_adv_d\tl_sync\tl_reg"

    def tsv_line(self) -> str:
        return (f"{self.step}\t{self.source}\t{self.l_rec:.9e}\t"
                f"{self.l_adv_g:.9e}\t{self.l_adv_d:.9e}\t{self.l_sync:.9e}\t"
                f"{self.l_reg:.9e}")


@dataclass
class PersonalizeResult:
    adapter: PersonalAdapter
    history: list[PersonalStepRecord] = field(repr=False)


def _epoch_starts(store: ClipStore) -> list[tuple[int, int]]:
    """Non-overlapping window starts covering each personal clip once."""
    pairs = []
    for clip_index, clip in enumerate(store.clips):
        for start in range(0, clip.n_frames - WINDOW_FRAMES + 1,
                           WINDOW_FRAMES):
            pairs.append((clip_index, start))
    return pairs


def personalize(backbone: Backbone, discriminator: Discriminator,
                person_store: ClipStore, general_store: ClipStore,
                config: RunConfig, syncnet: SyncNet | None = None,
                log_stream: TextIO | None = None) -> PersonalizeResult:
    """Fit an adapter to one speaker on a frozen base.

    Both encoders, the generator base, and the sync scorer are frozen and
    byte-verified unchanged afterward; the discriminator keeps training (it
    is live machinery for the adversarial term, not part of the adapter).
    One epoch visits every non-overlapping personal window once in shuffled
    order, pairing each personal step with one general-data step.
    """
    if person_store.total_seconds() < MIN_PERSONAL_SECONDS:
        raise DataError(
            f"personalization needs >= {MIN_PERSONAL_SECONDS:.0f}s of "
            f"personal data, got {person_store.total_seconds():.2f}s")
    person_store.require_min_frames(WINDOW_FRAMES)
    general_store.require_min_frames(WINDOW_FRAMES)
    if person_store.size != config.image_size \
            or general_store.size != config.image_size:
        raise ValidationError("dataset frame size does not match config")
    if config.lambda_sync > 0 and syncnet is None:
        raise TrainingError(
            "lambda_sync > 0 requires a trained sync scorer; pass one or "
            "set lambda_sync 0")
    if config.threads > 0:
        torch.set_num_threads(config.threads)

    extractor = PerceptualExtractor(config.n_perceptual, config.image_size)
    frozen = {"encoder_face": backbone.face_encoder,
              "encoder_audio": backbone.audio_encoder,
              "generator": backbone.generator}
    if syncnet is not None:
        frozen["syncnet"] = syncnet
    for module in frozen.values():
        freeze_module(module)
    frozen_bytes = {name: state_bytes(module)
                    for name, module in frozen.items()}

    torch.manual_seed(config.seed)
    adapter = PersonalAdapter(backbone, config)
    rng = np.random.default_rng(config.seed + 1)

    starts = _epoch_starts(person_store)
    total_steps = 2 * config.epochs * len(starts)
    optimizer = torch.optim.Adam(adapter.parameters(), lr=config.lr_personal,
                                 betas=(config.adam_beta1, config.adam_beta2))
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda s: 0.5 * (1.0 + math.cos(math.pi * s / max(total_steps, 1))))
    optimizer_d = torch.optim.Adam(discriminator.parameters(),
                                   lr=config.lr_disc,
                                   betas=(config.adam_beta1,
                                          config.adam_beta2))

    mask = build_umask(config.image_size)
    keep = torch.from_numpy(
        (1 - mask.values).astype(np.float32))[None, None, :, :]
    history: list[PersonalStepRecord] = []
    if log_stream is not None:
        print(PersonalStepRecord.TSV_HEADER, file=log_stream)
    step = 0

    for _ in range(config.epochs):
        order = rng.permutation(len(starts))
        for position in order:
            clip_index, start = starts[int(position)]
            clip = person_store.clips[clip_index]
            outside = [i for i in range(clip.n_frames)
                       if i < start or i >= start + WINDOW_FRAMES]
            reference = (outside[int(rng.integers(len(outside)))]
                         if outside else int(rng.integers(clip.n_frames)))
            step = _adapter_step(
                backbone, adapter, discriminator, extractor, syncnet,
                clip, start, reference, keep, config, optimizer, scheduler,
                optimizer_d, history, log_stream, step, "personal")

            general = general_store.clips[int(rng.integers(len(general_store)))]
            g_start, g_reference = sample_window(general, rng)
            step = _adapter_step(
                backbone, adapter, discriminator, extractor, syncnet,
                general, g_start, g_reference, keep, config, optimizer,
                scheduler, optimizer_d, history, log_stream, step, "general")

    for name, module in frozen.items():
        if state_bytes(module) != frozen_bytes[name]:
            raise TrainingError(
                f"frozen module '{name}' changed during personalization")
    return PersonalizeResult(adapter=adapter, history=history)


def _adapter_step(backbone, adapter, discriminator, extractor, syncnet,
                  clip, start, reference, keep, config, optimizer, scheduler,
                  optimizer_d, history, log_stream, step, source) -> int:
    targets, masked, ref, slabs = _window_tensors(clip, start, reference,
                                                  keep)
    pyramid, face_style = backbone.face_encoder(masked, ref)
    audio_style = backbone.audio_encoder(slabs)
    style = build_style(audio_style, face_style, config.use_face_style)
    mask = build_umask(config.image_size)
    gated = mask_pyramid(pyramid, mask, enabled=config.mask_enabled)
    deltas = predict_dw(adapter, face_style)
    overlay = adapter.overlay()
    fake = backbone.generator(gated, StyleState(style, deltas=deltas),
                              delta=overlay)

    l_adv_d = 0.0
    if config.adversarial:
        d_loss = d_logistic_loss(discriminator(targets),
                                 discriminator(fake.detach()))
        d_total = d_loss
        if config.r1_gamma > 0 and step % config.r1_interval == 0:
            d_total = d_total + r1_penalty(discriminator, targets,
                                           config.r1_gamma)
        optimizer_d.zero_grad()
        d_total.backward()
        if config.grad_clip > 0:
            nn.utils.clip_grad_norm_(discriminator.parameters(),
                                     config.grad_clip)
        optimizer_d.step()
        l_adv_d = float(d_loss.detach())

    l_rec = reconstruction_loss(fake, targets, extractor)
    zero = torch.zeros(())
    l_adv_g = (g_nonsaturating_loss(discriminator(fake))
               if config.adversarial else zero)
    l_sync = zero
    if syncnet is not None:
        slab = torch.from_numpy(mel_slab(clip.mel, start))[None]
        # score the composite, as in training: generated pixels inside the
        # mask only, pasted into the real frames
        composite = targets * keep + fake * (1.0 - keep)
        if config.lambda_sync > 0:
            l_sync = sync_loss(syncnet, composite, slab)
        else:
            with torch.no_grad():
                l_sync = sync_loss(syncnet, composite, slab)
    l_reg = personal_regularizer(deltas, overlay, config.lambda_person)
    total = (l_adv_g + config.lambda_rec * l_rec
             + config.lambda_sync * l_sync + l_reg)
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite personalization loss at step {step}")
    optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        nn.utils.clip_grad_norm_(adapter.parameters(), config.grad_clip)
    optimizer.step()
    scheduler.step()

    record = PersonalStepRecord(
        step=step, source=source, l_rec=float(l_rec.detach()),
        l_adv_g=float(l_adv_g.detach()), l_adv_d=l_adv_d,
        l_sync=float(l_sync.detach()), l_reg=float(l_reg.detach()))
    history.append(record)
    if log_stream is not None and step % config.log_interval == 0:
        print(record.tsv_line(), file=log_stream)
    return step + 1
