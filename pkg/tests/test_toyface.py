"""Toy face rendering, masking, and clip synthesis."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_umask, dark_pixels, tiny_spec
from lipsynth.errors import DataError, ValidationError
from lipsynth.melspec import audio_envelope
from lipsynth.toyface import (
    ToySpeakerSpec,
    build_umask,
    downsample_mask,
    mask_frame,
    mouth_landmarks_for,
    random_speakers,
    render_face_frame,
    synthesize_clip,
)

MASK_PIXELS_64 = 1264  # frozen from the brute-force oracle below
MASK_PIXELS_16 = 75


class TestUMask:
    def test_known_samples_at_64(self):
        mask = build_umask(64).values
        assert mask[48, 32] == 1   # below center, inside ellipse
        assert mask[16, 32] == 0   # above center
        assert mask[60, 2] == 0    # below center but outside ellipse

    @pytest.mark.parametrize("size,expected",
                             [(64, MASK_PIXELS_64), (16, MASK_PIXELS_16)])
    def test_matches_brute_force_oracle(self, size, expected):
        oracle = brute_force_umask(size)
        assert int(oracle.sum()) == expected
        assert np.array_equal(build_umask(size).values, oracle)

    def test_upper_half_never_masked(self):
        for size in (16, 32, 64):
            mask = build_umask(size).values
            assert not mask[: size // 2 + 1].any()
            assert mask.sum() > 0

    def test_rejects_bad_sizes(self):
        for size in (0, 7, 12, 48):
            with pytest.raises(ValidationError):
                build_umask(size)

    @given(seed=st.integers(0, 2**32 - 1), size=st.sampled_from([16, 32]))
    @settings(max_examples=25, deadline=None)
    def test_masking_is_idempotent(self, seed, size):
        rng = np.random.default_rng(seed)
        frame = rng.random((size, size, 3), dtype=np.float32)
        mask = build_umask(size)
        once = mask_frame(frame, mask)
        assert np.array_equal(mask_frame(once, mask), once)

    def test_masked_pixels_zero_others_untouched(self):
        rng = np.random.default_rng(0)
        frame = rng.random((32, 32, 3), dtype=np.float32) + 0.5
        mask = build_umask(32)
        out = mask_frame(frame, mask)
        hidden = mask.values.astype(bool)
        assert np.all(out[hidden] == 0.0)
        assert np.array_equal(out[~hidden], frame[~hidden])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            mask_frame(np.zeros((16, 16, 3), dtype=np.float32), build_umask(32))

    def test_downsample_center_sampling(self):
        mask = build_umask(64)
        half = downsample_mask(mask, 32)
        assert half.shape == (32, 32)
        assert np.array_equal(half, mask.values[1::2, 1::2])
        with pytest.raises(ValidationError):
            downsample_mask(mask, 48)


class TestRendering:
    def test_render_shapes_and_range(self):
        frame = render_face_frame(tiny_spec(), 0.5, 64)
        assert frame.shape == (64, 64, 3)
        assert frame.dtype == np.float32
        assert frame.min() >= 0.0 and frame.max() <= 1.0

    def test_palette_is_uint8_exact(self):
        frame = render_face_frame(tiny_spec(), 0.7, 64)
        as_u8 = np.rint(frame * 255.0)
        assert np.array_equal(as_u8.astype(np.float32) / 255.0, frame)
        # flat regions: at most background, head, eye, mouth colors
        colors = np.unique(frame.reshape(-1, 3), axis=0)
        assert len(colors) <= 4

    def test_closed_mouth_is_single_row_line(self):
        frame = render_face_frame(tiny_spec(), 0.0, 64)
        mouth = dark_pixels(frame) & build_umask(64).values.astype(bool)
        rows = np.unique(np.nonzero(mouth)[0])
        assert list(rows) == [round(0.72 * 64)]
        assert mouth.sum() >= 2 * int(0.18 * 64) - 2

    def test_mouth_grows_with_opening(self):
        areas = []
        for opening in (0.0, 0.3, 0.6, 1.0):
            frame = render_face_frame(tiny_spec(), opening, 64)
            mouth = dark_pixels(frame) & build_umask(64).values.astype(bool)
            areas.append(int(mouth.sum()))
        assert areas == sorted(areas)
        assert areas[0] < areas[-1]

    def test_mouth_inside_mask_eyes_outside(self):
        mask = build_umask(64).values.astype(bool)
        for opening in (0.0, 0.5, 1.0):
            frame = render_face_frame(tiny_spec(), opening, 64)
            dark = dark_pixels(frame)
            mouth = dark & mask
            eyes = dark & ~mask
            assert mouth.any() and eyes.any()
            # masking must remove every mouth-colored pixel
            masked = mask_frame(frame, build_umask(64))
            mouth_rgb = np.array([16, 8, 10], dtype=np.float32) / 255.0
            assert not np.all(masked == mouth_rgb, axis=-1).any()

    def test_rejects_out_of_range_opening(self):
        with pytest.raises(ValidationError):
            render_face_frame(tiny_spec(), 1.2, 64)
        with pytest.raises(ValidationError):
            render_face_frame(tiny_spec(), -0.1, 64)

    def test_deterministic(self):
        a = render_face_frame(tiny_spec(), 0.37, 32)
        b = render_face_frame(tiny_spec(), 0.37, 32)
        assert np.array_equal(a, b)


class TestLandmarks:
    @given(opening=st.floats(0.0, 1.0, allow_nan=False),
           size=st.sampled_from([16, 32, 64]))
    @settings(max_examples=40, deadline=None)
    def test_top_bottom_distance_tracks_opening(self, opening, size):
        lm = mouth_landmarks_for(opening, size)
        assert lm.shape == (4, 2)
        gap = np.linalg.norm(lm[3] - lm[2])
        assert gap == pytest.approx(2 * opening * 0.12 * size, abs=1e-4)
        width = np.linalg.norm(lm[1] - lm[0])
        assert width == pytest.approx(2 * 0.18 * size, abs=1e-4)

    def test_landmarks_inside_mask(self):
        mask = build_umask(64).values
        for opening in (0.0, 1.0):
            for x, y in mouth_landmarks_for(opening, 64):
                assert mask[round(float(y)), round(float(x))] == 1


class TestSpeakerSpec:
    def test_valid_spec_roundtrips_color(self):
        spec = tiny_spec(hue=0.6)
        rgb = spec.head_rgb()
        assert all(0 <= c <= 255 for c in rgb)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValidationError):
            ToySpeakerSpec(0, 1.2, 0.62, 0.5)          # hue out of range
        with pytest.raises(ValidationError):
            ToySpeakerSpec(0, 0.1, 0.3, 0.5)           # too narrow
        with pytest.raises(ValidationError):
            ToySpeakerSpec(0, 0.1, 0.62, 0.9, 0.2)     # gain + rest > 1
        with pytest.raises(ValidationError):
            ToySpeakerSpec(-1, 0.1, 0.62, 0.5)

    def test_random_speakers_are_valid_and_deterministic(self):
        a = random_speakers(4, seed=9)
        b = random_speakers(4, seed=9)
        assert a == b
        assert len({s.identity_id for s in a}) == 4
        hues = sorted(s.face_hue for s in a)
        assert all(hues[i + 1] - hues[i] > 0.05 for i in range(3))


class TestSynthesizeClip:
    def test_shapes_and_alignment(self):
        clip = synthesize_clip(tiny_spec(), 1.0, seed=3, size=32)
        assert clip.n_frames == 25
        assert clip.frames.shape == (25, 32, 32, 3)
        assert len(clip.waveform) == 25 * 640
        assert clip.mel.shape == (25 * 640 // 200, 80)
        assert clip.mouth_open_gt.shape == (25,)
        assert clip.mouth_landmarks_gt.shape == (25, 4, 2)

    def test_deterministic_in_seed(self):
        a = synthesize_clip(tiny_spec(), 0.6, seed=11, size=16)
        b = synthesize_clip(tiny_spec(), 0.6, seed=11, size=16)
        c = synthesize_clip(tiny_spec(), 0.6, seed=12, size=16)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.waveform, b.waveform)
        assert not np.array_equal(a.waveform, c.waveform)

    def test_silence_gives_flat_mouth_at_rest(self):
        spec = tiny_spec(gain=0.8, rest=0.2)
        t = round(0.8 * 25)
        clip = synthesize_clip(spec, 0.8, seed=0, size=16,
                               envelope=np.zeros(t))
        assert np.all(clip.waveform == 0.0)
        assert np.allclose(clip.mouth_open_gt, 0.2, atol=1e-6)
        assert all(np.array_equal(clip.frames[0], clip.frames[i])
                   for i in range(clip.n_frames))

    def test_full_envelope_opens_mouth_fully(self):
        spec = tiny_spec(gain=1.0, rest=0.0)
        clip = synthesize_clip(spec, 0.6, seed=0, size=32,
                               envelope=np.ones(15))
        assert np.allclose(clip.mouth_open_gt, 1.0, atol=1e-6)
        assert np.abs(clip.waveform).max() > 0.9

    def test_audio_envelope_tracks_mouth(self):
        clip = synthesize_clip(tiny_spec(gain=1.0), 2.0, seed=5, size=16)
        env = audio_envelope(clip.waveform, clip.n_frames)
        corr = np.corrcoef(env, clip.mouth_open_gt)[0, 1]
        assert corr > 0.9

    def test_too_short_rejected(self):
        with pytest.raises(DataError):
            synthesize_clip(tiny_spec(), 0.1, seed=0)

    def test_bad_envelope_rejected(self):
        with pytest.raises(ValidationError):
            synthesize_clip(tiny_spec(), 0.6, seed=0, size=16,
                            envelope=np.full(15, 1.5))
        with pytest.raises(ValidationError):
            synthesize_clip(tiny_spec(), 0.6, seed=0, size=16,
                            envelope=np.zeros(7))
