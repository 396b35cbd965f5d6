"""Log-mel spectrograms for 16 kHz mono speech-like audio.

The analysis is pinned so that audio and 25 fps video stay aligned by plain
integer arithmetic:

* window 800 samples (50 ms), hop 200 samples (12.5 ms), periodic Hann;
* 80 triangular mel bands between 55 and 7600 Hz, HTK mel scale, peak 1;
* natural log with a 1e-5 power floor;
* a waveform of ``n`` samples yields exactly ``n // 200`` mel frames, i.e.
  3.2 mel frames per video frame, so the 16-row conditioning slab for video
  frame ``t`` starts at mel row ``(t * 80) // 25`` and never needs padding
  while ``t`` is at most ``T - 5``.

Frames are taken at ``[i*200, i*200 + 800)`` with zero padding on the right
only; shifting audio by one hop therefore shifts mel rows by exactly one.
"""

from __future__ import annotations

import functools

import numpy as np

from .errors import AudioError, ValidationError

SAMPLE_RATE = 16000
FPS = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640
HOP = 200
WIN = 800
N_MELS = 80
FMIN = 55.0
FMAX = 7600.0
LOG_FLOOR = 1e-5
SLAB_WIDTH = 16
MEL_PER_FRAME = (FPS, 80)  # 80 mel rows per 25 video frames


def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=4)
def mel_filterbank(n_fft: int = WIN, sample_rate: int = SAMPLE_RATE,
                   n_mels: int = N_MELS, fmin: float = FMIN,
                   fmax: float = FMAX) -> np.ndarray:
    """Triangular mel filterbank, shape [n_mels, n_fft//2 + 1], peak 1."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    bank = np.zeros((n_mels, n_fft // 2 + 1), dtype=np.float64)
    for i in range(n_mels):
        lo, mid, hi = points[i], points[i + 1], points[i + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        bank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def compute_mel(waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Log-mel spectrogram, shape [len(waveform)//200, 80], float32.

    Raises :class:`AudioError` for non-16 kHz input (no resampling here; the
    toy pipeline generates audio at the native rate) or waveforms shorter
    than one hop.
    """
    if sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1:
        raise AudioError(f"waveform must be 1-D, got shape {wave.shape}")
    if not np.all(np.isfinite(wave)):
        raise AudioError("waveform contains non-finite samples")
    n_frames = len(wave) // HOP
    if n_frames < 1:
        raise AudioError(f"waveform too short: {len(wave)} samples < one hop ({HOP})")
    padded = np.zeros((n_frames - 1) * HOP + WIN, dtype=np.float64)
    padded[: len(wave)] = wave[: len(padded)]
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = padded[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WIN) / WIN)
    spectrum = np.fft.rfft(frames * window, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    mel_power = power @ mel_filterbank().T
    return np.log(np.maximum(mel_power, LOG_FLOOR)).astype(np.float32)


def slab_start(frame_index: int) -> int:
    """First mel row of the conditioning slab for a video frame index."""
    return (frame_index * MEL_PER_FRAME[1]) // MEL_PER_FRAME[0]


def mel_slab(mel: np.ndarray, frame_index: int) -> np.ndarray:
    """16-column conditioning slab [80, 16] for video frame ``frame_index``.

    Rows are mel bands and columns are time.  Rows past the end of ``mel``
    are filled with the log floor, which only happens for frame indices past
    ``T - 5`` of the source clip.
    """
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise ValidationError(f"mel must be [T_mel, {N_MELS}], got {mel.shape}")
    if frame_index < 0:
        raise ValidationError(f"frame_index must be non-negative, got {frame_index}")
    start = slab_start(frame_index)
    if start >= mel.shape[0]:
        raise ValidationError(
            f"frame_index {frame_index} maps past the end of a "
            f"{mel.shape[0]}-row mel spectrogram")
    chunk = mel[start: start + SLAB_WIDTH]
    if chunk.shape[0] < SLAB_WIDTH:
        pad = np.full((SLAB_WIDTH - chunk.shape[0], N_MELS), np.log(LOG_FLOOR),
                      dtype=mel.dtype)
        chunk = np.concatenate([chunk, pad], axis=0)
    return np.ascontiguousarray(chunk.T.astype(np.float32))


def audio_envelope(waveform: np.ndarray, n_frames: int) -> np.ndarray:
    """Per-video-frame amplitude: max absolute sample inside each frame."""
    wave = np.asarray(waveform, dtype=np.float64)
    if len(wave) < n_frames * SAMPLES_PER_FRAME:
        raise AudioError(
            f"waveform has {len(wave)} samples, need {n_frames * SAMPLES_PER_FRAME} "
            f"for {n_frames} frames")
    chunks = np.abs(wave[: n_frames * SAMPLES_PER_FRAME]).reshape(n_frames, SAMPLES_PER_FRAME)
    return chunks.max(axis=1).astype(np.float32)
