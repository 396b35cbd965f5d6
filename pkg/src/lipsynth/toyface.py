"""Procedurally generated talking-face clips ("ToyTalker").

Each clip is a deterministic function of a speaker spec, a duration, and a
seed.  A speaker is a flat-colored ellipse head with two eyes and a mouth
whose vertical opening tracks a smooth random amplitude envelope; the audio
track is a 220 Hz tone scaled by the same envelope, so ground-truth
audio/visual correspondence is exact by construction.

Geometry is pinned in fractions of the image side S (origin top-left,
x right, y down, pixel centers at integer coordinates):

* head ellipse: center (S/2, S/2), semi-axes (face_width_frac*S/2, 0.46*S);
* eyes: circles of radius 0.045*S at (S/2 +- 0.15*S, 0.38*S);
* mouth: ellipse at (S/2, round(0.72*S)), semi-axes (0.18*S, open*0.12*S).
  A fully closed mouth (open = 0) degenerates to a single-pixel-high line.

The mouth sits strictly inside the lower-face occlusion mask, the eyes
strictly outside, so masking hides exactly the audio-dependent content.
All palette values are exact uint8 multiples of 1/255, which keeps PNG
round-trips bit-exact.
"""

from __future__ import annotations

import colorsys
import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import DataError, ValidationError
from .melspec import FPS, SAMPLE_RATE, SAMPLES_PER_FRAME, compute_mel

BACKGROUND_RGB = (200, 200, 204)
EYE_RGB = (20, 18, 26)
MOUTH_RGB = (16, 8, 10)

# Fractions of the image side S.
HEAD_SEMI_Y = 0.46
EYE_OFFSET_X = 0.15
EYE_Y = 0.38
EYE_RADIUS = 0.045
MOUTH_CENTER_Y = 0.72
MOUTH_SEMI_X = 0.18
MOUTH_MAX_SEMI_Y = 0.12
MASK_SEMI_X = 0.42
MASK_SEMI_Y = 0.48

# Knots every 0.12 s put the envelope's dominant motion near syllable rate
# (~8 Hz); slower envelopes leave sync windows too self-similar to
# discriminate aligned from offset audio.
ENVELOPE_KNOT_SPACING_S = 0.12
TONE_HZ = 220.0


@dataclass(frozen=True)
class ToySpeakerSpec:
    """Identity parameters of one toy speaker.

    ``mouth_gain`` is the slope from audio amplitude to mouth opening and
    ``mouth_rest_open`` the opening at silence; their sum is capped at 1 so
    openings never clip for envelopes in [0, 1].
    """

    identity_id: int
    face_hue: float
    face_width_frac: float
    mouth_gain: float
    mouth_rest_open: float = 0.0

    def __post_init__(self) -> None:
        if self.identity_id < 0:
            raise ValidationError("identity_id must be non-negative")
        if not 0.0 <= self.face_hue < 1.0:
            raise ValidationError(f"face_hue must be in [0, 1), got {self.face_hue}")
        if not 0.55 <= self.face_width_frac <= 0.95:
            raise ValidationError(
                f"face_width_frac must be in [0.55, 0.95], got {self.face_width_frac}")
        if not 0.05 <= self.mouth_gain <= 1.0:
            raise ValidationError(
                f"mouth_gain must be in [0.05, 1], got {self.mouth_gain}")
        if not 0.0 <= self.mouth_rest_open <= 0.3:
            raise ValidationError(
                f"mouth_rest_open must be in [0, 0.3], got {self.mouth_rest_open}")
        if self.mouth_gain + self.mouth_rest_open > 1.0:
            raise ValidationError("mouth_gain + mouth_rest_open must not exceed 1")

    def head_rgb(self) -> tuple[int, int, int]:
        r, g, b = colorsys.hsv_to_rgb(self.face_hue, 0.55, 0.92)
        return (round(r * 255), round(g * 255), round(b * 255))


def random_speakers(count: int, seed: int) -> list[ToySpeakerSpec]:
    """Speakers with evenly spread hues and randomized mouth dynamics."""
    if count < 1:
        raise ValidationError("count must be positive")
    rng = np.random.default_rng(seed)
    speakers = []
    for i in range(count):
        hue = (i / count + rng.uniform(0.0, 0.5 / count)) % 1.0
        gain = rng.uniform(0.3, 0.95)
        speakers.append(ToySpeakerSpec(
            identity_id=i,
            face_hue=float(hue),
            face_width_frac=float(rng.uniform(0.58, 0.9)),
            mouth_gain=float(gain),
            mouth_rest_open=float(rng.uniform(0.0, min(0.05, 1.0 - gain))),
        ))
    return speakers


@dataclass(frozen=True)
class UMask:
    """Binary lower-face occlusion mask; 1 marks hidden pixels."""

    size: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.shape != (self.size, self.size):
            raise ValidationError("mask values must be square [size, size]")
        if self.values.dtype != np.uint8:
            raise ValidationError("mask values must be uint8")
        bad = set(np.unique(self.values)) - {0, 1}
        if bad:
            raise ValidationError(f"mask values must be binary, found {sorted(bad)}")


@functools.lru_cache(maxsize=8)
def build_umask(size: int) -> UMask:
    """Lower half of an ellipse with semi-axes (0.42*S, 0.48*S) at the center.

    Covers the mouth at any opening while leaving eyes and head outline
    visible; only rows strictly below S/2 are maskable.
    """
    _check_size(size)
    ys, xs = np.ogrid[:size, :size]
    cx = cy = size / 2.0
    inside = ((xs - cx) / (MASK_SEMI_X * size)) ** 2 \
        + ((ys - cy) / (MASK_SEMI_Y * size)) ** 2 <= 1.0
    values = (inside & (ys > size / 2.0)).astype(np.uint8)
    values.setflags(write=False)
    return UMask(size=size, values=values)


def mask_frame(frame: np.ndarray, mask: UMask) -> np.ndarray:
    """Zero out hidden pixels: returns (1 - M) * frame."""
    frame = np.asarray(frame)
    if frame.ndim not in (2, 3) or frame.shape[:2] != (mask.size, mask.size):
        raise ValidationError(
            f"frame shape {frame.shape} does not match mask size {mask.size}")
    keep = (1 - mask.values).astype(frame.dtype)
    if frame.ndim == 3:
        keep = keep[:, :, None]
    return frame * keep


def downsample_mask(mask: UMask, resolution: int) -> np.ndarray:
    """Center-sample the mask onto a coarser power-of-two grid."""
    if resolution > mask.size or mask.size % resolution != 0:
        raise ValidationError(
            f"cannot downsample mask of size {mask.size} to {resolution}")
    factor = mask.size // resolution
    return mask.values[factor // 2::factor, factor // 2::factor]


def mouth_landmarks_for(opening: float, size: int) -> np.ndarray:
    """Mouth corner landmarks [left, right, top, bottom] as (x, y), float32."""
    cx = size / 2.0
    cy = float(round(MOUTH_CENTER_Y * size))
    a_h = MOUTH_SEMI_X * size
    a_v = float(opening) * MOUTH_MAX_SEMI_Y * size
    return np.array(
        [[cx - a_h, cy], [cx + a_h, cy], [cx, cy - a_v], [cx, cy + a_v]],
        dtype=np.float32)


def render_face_frame(spec: ToySpeakerSpec, mouth_open: float, size: int) -> np.ndarray:
    """One frame [S, S, 3], float32 in [0, 1], at the given mouth opening."""
    _check_size(size)
    if not 0.0 <= mouth_open <= 1.0:
        raise ValidationError(f"mouth_open must be in [0, 1], got {mouth_open}")
    ys, xs = np.ogrid[:size, :size]
    c = size / 2.0

    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB

    head = ((xs - c) / (spec.face_width_frac * size / 2.0)) ** 2 \
        + ((ys - c) / (HEAD_SEMI_Y * size)) ** 2 <= 1.0
    img[head] = spec.head_rgb()

    r_eye = EYE_RADIUS * size
    for ex in (c - EYE_OFFSET_X * size, c + EYE_OFFSET_X * size):
        eye = (xs - ex) ** 2 + (ys - EYE_Y * size) ** 2 <= r_eye ** 2
        img[eye] = EYE_RGB

    cy = round(MOUTH_CENTER_Y * size)
    a_h = MOUTH_SEMI_X * size
    a_v = mouth_open * MOUTH_MAX_SEMI_Y * size
    if a_v > 0.0:
        mouth = ((xs - c) / a_h) ** 2 + ((ys - cy) / a_v) ** 2 <= 1.0
    else:
        mouth = (ys == cy) & (np.abs(xs - c) <= a_h)
    img[mouth] = MOUTH_RGB

    return img.astype(np.float32) / 255.0


@dataclass
class VideoClip:
    """A toy clip: frames, audio, mel, and (for synthesized data) ground truth.

    Invariants checked at construction: frames are float32 in [0, 1] with at
    least 5 frames, audio covers the video exactly (640 samples per frame),
    and the mel row count equals ``len(waveform) // 200``.
    """

    frames: np.ndarray
    waveform: np.ndarray
    mel: np.ndarray
    fps: int = FPS
    mouth_open_gt: np.ndarray | None = None
    mouth_landmarks_gt: np.ndarray | None = None
    speaker: ToySpeakerSpec | str = "unknown"

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[3] != 3 or frames.shape[1] != frames.shape[2]:
            raise ValidationError(f"frames must be [T, S, S, 3], got {frames.shape}")
        if frames.shape[0] < 5:
            raise DataError(f"clip must have at least 5 frames, got {frames.shape[0]}")
        if frames.dtype != np.float32:
            raise ValidationError(f"frames must be float32, got {frames.dtype}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("frames contain non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValidationError("frame values must lie in [0, 1]")
        if self.fps != FPS:
            raise ValidationError(f"only {FPS} fps clips are supported")
        if len(self.waveform) != frames.shape[0] * SAMPLES_PER_FRAME:
            raise ValidationError(
                f"waveform length {len(self.waveform)} does not cover "
                f"{frames.shape[0]} frames ({SAMPLES_PER_FRAME} samples each)")
        expected_rows = len(self.waveform) // 200
        if self.mel.shape != (expected_rows, 80):
            raise ValidationError(
                f"mel shape {self.mel.shape} does not match waveform "
                f"(expected [{expected_rows}, 80])")
        if self.mouth_open_gt is not None and len(self.mouth_open_gt) != frames.shape[0]:
            raise ValidationError("mouth_open_gt length must equal frame count")
        if self.mouth_landmarks_gt is not None \
                and self.mouth_landmarks_gt.shape != (frames.shape[0], 4, 2):
            raise ValidationError("mouth_landmarks_gt must be [T, 4, 2]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> int:
        return self.frames.shape[1]


def synthesize_clip(spec: ToySpeakerSpec, duration_s: float, seed: int,
                    size: int = 64, envelope: np.ndarray | None = None) -> VideoClip:
    """Generate one clip; a pure function of (spec, duration, seed, size).

    ``envelope`` overrides the random amplitude envelope with explicit
    per-frame values in [0, 1] (useful for silence or pulse probes); the
    waveform then follows a monotone interpolation of those values.
    """
    n_frames = round(duration_s * FPS)
    if n_frames < 5:
        raise DataError(
            f"duration {duration_s}s gives {n_frames} frames; need at least 5")
    _check_size(size)
    n_samples = n_frames * SAMPLES_PER_FRAME
    frame_times = np.arange(n_frames, dtype=np.float64) / FPS
    sample_times = np.arange(n_samples, dtype=np.float64) / SAMPLE_RATE

    if envelope is None:
        rng = np.random.default_rng(seed)
        last = n_frames / FPS
        knot_times = np.arange(0.0, last + ENVELOPE_KNOT_SPACING_S, ENVELOPE_KNOT_SPACING_S)
        knots = rng.uniform(0.0, 1.0, size=len(knot_times))
        spline = PchipInterpolator(knot_times, knots)
        sample_eval = sample_times
    else:
        env = np.asarray(envelope, dtype=np.float64)
        if env.shape != (n_frames,):
            raise ValidationError(
                f"envelope must have shape ({n_frames},), got {env.shape}")
        if env.min() < 0.0 or env.max() > 1.0:
            raise ValidationError("envelope values must lie in [0, 1]")
        spline = PchipInterpolator(frame_times, env)
        # Frame knots end one frame before the audio does; hold the last value.
        sample_eval = np.minimum(sample_times, frame_times[-1])
    env_frames = np.clip(spline(frame_times), 0.0, 1.0)
    env_samples = np.clip(spline(sample_eval), 0.0, 1.0)

    waveform = (env_samples * np.sin(2.0 * np.pi * TONE_HZ * sample_times)).astype(np.float32)
    mouth_open = np.clip(spec.mouth_gain * env_frames + spec.mouth_rest_open,
                         0.0, 1.0).astype(np.float32)

    frames = np.stack([render_face_frame(spec, float(o), size) for o in mouth_open])
    landmarks = np.stack([mouth_landmarks_for(float(o), size) for o in mouth_open])

    return VideoClip(
        frames=frames,
        waveform=waveform,
        mel=compute_mel(waveform),
        mouth_open_gt=mouth_open,
        mouth_landmarks_gt=landmarks,
        speaker=spec,
    )


def _check_size(size: int) -> None:
    if size < 8 or size & (size - 1) != 0:
        raise ValidationError(f"size must be a power of two >= 8, got {size}")
