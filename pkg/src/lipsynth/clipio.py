"""On-disk clip directories and the in-memory training store.

A clip directory holds:

* ``manifest.txt``: ``key=value`` lines (frame count, size, speaker fields);
* ``frames/frame_00000.png`` ...: one 8-bit PNG per frame;
* ``waveform.f32``, ``mel.f32`` and, when ground truth exists,
  ``mouth_open_gt.f32`` / ``mouth_landmarks_gt.f32``.

``.f32`` files carry a one-line ASCII header ``f32 <dim0> <dim1> ...`` and
then raw little-endian float32 data, so they are readable with two lines of
numpy anywhere.

:class:`ClipStore` keeps whole datasets resident for training: frames are
held quantized to uint8 (a 64x64 dataset of a few hundred clips then fits in
well under a gigabyte) and converted to float per sampled window, matching
exactly what a PNG round-trip would produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AudioError, DataError
from .melspec import SAMPLES_PER_FRAME
from .toyface import ToySpeakerSpec, VideoClip

MANIFEST_NAME = "manifest.txt"
CLIP_FORMAT_VERSION = 1


def write_array_f32(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = "f32 " + " ".join(str(d) for d in array.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(array.tobytes())


def read_array_f32(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if not parts or parts[0] != "f32":
            raise DataError(f"{path}: not an f32 array file (header {header!r})")
        try:
            shape = tuple(int(p) for p in parts[1:])
        except ValueError:
            raise DataError(f"{path}: malformed f32 header {header!r}") from None
        data = fh.read()
    expected = int(np.prod(shape)) * 4 if shape else 4
    if len(data) != expected:
        raise DataError(
            f"{path}: payload has {len(data)} bytes, header promises {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def save_clip(clip: VideoClip, directory: str | Path) -> Path:
    """Write a clip directory; returns its path."""
    directory = Path(directory)
    frames_dir = directory / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)

    lines = [
        f"format={CLIP_FORMAT_VERSION}",
        f"n_frames={clip.n_frames}",
        f"size={clip.size}",
        f"fps={clip.fps}",
    ]
    if isinstance(clip.speaker, ToySpeakerSpec):
        spec = clip.speaker
        lines += [
            f"speaker.identity_id={spec.identity_id}",
            f"speaker.face_hue={spec.face_hue!r}",
            f"speaker.face_width_frac={spec.face_width_frac!r}",
            f"speaker.mouth_gain={spec.mouth_gain!r}",
            f"speaker.mouth_rest_open={spec.mouth_rest_open!r}",
        ]
    else:
        lines.append(f"speaker.name={clip.speaker}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")

    for t in range(clip.n_frames):
        Image.fromarray(frame_to_uint8(clip.frames[t])).save(
            frames_dir / f"frame_{t:05d}.png")
    write_array_f32(directory / "waveform.f32", clip.waveform)
    write_array_f32(directory / "mel.f32", clip.mel)
    if clip.mouth_open_gt is not None:
        write_array_f32(directory / "mouth_open_gt.f32", clip.mouth_open_gt)
    if clip.mouth_landmarks_gt is not None:
        write_array_f32(directory / "mouth_landmarks_gt.f32", clip.mouth_landmarks_gt)
    return directory


def load_clip(directory: str | Path) -> VideoClip:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"{directory}: missing {MANIFEST_NAME}")
    manifest: dict[str, str] = {}
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    if manifest.get("format") != str(CLIP_FORMAT_VERSION):
        raise DataError(
            f"{directory}: unsupported clip format {manifest.get('format')!r}")
    try:
        n_frames = int(manifest["n_frames"])
        size = int(manifest["size"])
        fps = int(manifest["fps"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{directory}: malformed manifest ({exc})") from None

    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    for t in range(n_frames):
        path = directory / "frames" / f"frame_{t:05d}.png"
        if not path.is_file():
            raise DataError(f"{directory}: missing frame file {path.name}")
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if rgb.shape != (size, size, 3):
            raise DataError(f"{path}: frame shape {rgb.shape} != ({size}, {size}, 3)")
        frames[t] = rgb.astype(np.float32) / 255.0

    speaker: ToySpeakerSpec | str
    if "speaker.identity_id" in manifest:
        speaker = ToySpeakerSpec(
            identity_id=int(manifest["speaker.identity_id"]),
            face_hue=float(manifest["speaker.face_hue"]),
            face_width_frac=float(manifest["speaker.face_width_frac"]),
            mouth_gain=float(manifest["speaker.mouth_gain"]),
            mouth_rest_open=float(manifest["speaker.mouth_rest_open"]),
        )
    else:
        speaker = manifest.get("speaker.name", "unknown")

    open_path = directory / "mouth_open_gt.f32"
    lm_path = directory / "mouth_landmarks_gt.f32"
    return VideoClip(
        frames=frames,
        waveform=read_array_f32(directory / "waveform.f32"),
        mel=read_array_f32(directory / "mel.f32"),
        fps=fps,
        mouth_open_gt=read_array_f32(open_path) if open_path.is_file() else None,
        mouth_landmarks_gt=read_array_f32(lm_path) if lm_path.is_file() else None,
        speaker=speaker,
    )


def list_clip_dirs(root: str | Path) -> list[Path]:
    """Sorted clip directories directly under ``root`` (or ``root`` itself)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if (root / MANIFEST_NAME).is_file():
        return [root]
    dirs = sorted(p for p in root.iterdir()
                  if p.is_dir() and (p / MANIFEST_NAME).is_file())
    if not dirs:
        raise DataError(f"{root}: contains no clip directories")
    return dirs


@dataclass
class StoredClip:
    frames_u8: np.ndarray           # [T, S, S, 3] uint8
    waveform: np.ndarray            # [T * 640] float32
    mel: np.ndarray                 # [T_mel, 80] float32
    mouth_open_gt: np.ndarray | None
    mouth_landmarks_gt: np.ndarray | None
    speaker: ToySpeakerSpec | str
    name: str

    @property
    def n_frames(self) -> int:
        return self.frames_u8.shape[0]

    def frame_f32(self, index: int) -> np.ndarray:
        return self.frames_u8[index].astype(np.float32) / 255.0

    def frames_f32(self, indices) -> np.ndarray:
        return self.frames_u8[np.asarray(indices)].astype(np.float32) / 255.0

    def to_clip(self) -> VideoClip:
        return VideoClip(
            frames=self.frames_u8.astype(np.float32) / 255.0,
            waveform=self.waveform,
            mel=self.mel,
            mouth_open_gt=self.mouth_open_gt,
            mouth_landmarks_gt=self.mouth_landmarks_gt,
            speaker=self.speaker,
        )


class ClipStore:
    """A dataset of clips with uniform image size, resident in memory."""

    def __init__(self, clips: list[StoredClip]):
        if not clips:
            raise DataError("dataset contains no clips")
        sizes = {c.frames_u8.shape[1] for c in clips}
        if len(sizes) != 1:
            raise DataError(f"clips have mixed image sizes: {sorted(sizes)}")
        self.clips = clips
        self.size = sizes.pop()

    @classmethod
    def from_clips(cls, clips: list[VideoClip], names: list[str] | None = None) -> "ClipStore":
        names = names or [f"clip_{i:04d}" for i in range(len(clips))]
        stored = [StoredClip(
            frames_u8=frame_to_uint8(c.frames),
            waveform=np.asarray(c.waveform, dtype=np.float32),
            mel=np.asarray(c.mel, dtype=np.float32),
            mouth_open_gt=c.mouth_open_gt,
            mouth_landmarks_gt=c.mouth_landmarks_gt,
            speaker=c.speaker,
            name=name,
        ) for c, name in zip(clips, names)]
        return cls(stored)

    @classmethod
    def from_dir(cls, root: str | Path) -> "ClipStore":
        dirs = list_clip_dirs(root)
        clips = [load_clip(d) for d in dirs]
        return cls.from_clips(clips, names=[d.name for d in dirs])

    def __len__(self) -> int:
        return len(self.clips)

    def total_frames(self) -> int:
        return sum(c.n_frames for c in self.clips)

    def total_seconds(self) -> float:
        return self.total_frames() / 25.0

    def require_min_frames(self, minimum: int) -> None:
        for clip in self.clips:
            if clip.n_frames < minimum:
                raise DataError(
                    f"clip '{clip.name}' has {clip.n_frames} frames; "
                    f"need at least {minimum}")


def resolve_waveform(path: str | Path) -> np.ndarray:
    """Load driving audio from a clip directory, ``.f32`` file, or WAV.

    WAV input must be 16 kHz mono PCM16 or float32; anything else is
    rejected rather than resampled.
    """
    path = Path(path)
    if path.is_dir():
        wave_path = path / "waveform.f32"
        if not wave_path.is_file():
            raise DataError(f"{path}: clip directory has no waveform.f32")
        return read_array_f32(wave_path)
    if not path.is_file():
        raise DataError(f"audio file not found: {path}")
    if path.suffix == ".f32":
        wave = read_array_f32(path)
        if wave.ndim != 1:
            raise AudioError(f"{path}: waveform must be 1-D, got shape {wave.shape}")
        return wave
    if path.suffix.lower() == ".wav":
        import scipy.io.wavfile as wavfile

        rate, data = wavfile.read(path)
        if rate != 16000:
            raise AudioError(f"{path}: expected 16 kHz WAV, got {rate} Hz")
        if data.ndim != 1:
            raise AudioError(f"{path}: expected mono WAV, got shape {data.shape}")
        if data.dtype == np.int16:
            return data.astype(np.float32) / 32768.0
        if data.dtype == np.float32:
            return data.copy()
        raise AudioError(f"{path}: unsupported WAV sample format {data.dtype}")
    raise DataError(f"{path}: unsupported audio input (use clip dir, .f32, or .wav)")
