"""Losses, discriminator, and the generalized training loop."""

import io
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_gradients, tiny_spec
from lipsynth.clipio import ClipStore
from lipsynth.config import RunConfig
from lipsynth.errors import TrainingError, ValidationError
from lipsynth.generator import build_backbone
from lipsynth.melspec import mel_slab
from lipsynth.syncnet import (
    SyncNet,
    lower_half_window,
    state_bytes,
    sync_cosine,
    train_syncnet,
)
from lipsynth.toyface import synthesize_clip
import lipsynth.training as training
from lipsynth.training import (
    Discriminator,
    LossBreakdown,
    PerceptualExtractor,
    d_logistic_loss,
    g_nonsaturating_loss,
    r1_penalty,
    reconstruction_loss,
    sync_loss,
    train_generalized,
)

LN2 = math.log(2.0)


def tiny_store(n_clips=2, seconds=0.8, size=16):
    clips = [synthesize_clip(tiny_spec(gain=0.9), seconds, seed=40 + i, size=size)
             for i in range(n_clips)]
    return ClipStore.from_clips(clips)


def tiny_config(**overrides):
    base = dict(image_size=16, d_audio=8, d_face=8, d_sync=8,
                enc_base=4, enc_max=16, gen_base=4, gen_max=16,
                disc_base=4, disc_max=16, n_perceptual=2, steps=4,
                lambda_sync=0.0, seed=0)
    return RunConfig(**{**base, **overrides})


class TestPerceptualExtractor:
    def test_tap_shapes_halve(self):
        extractor = PerceptualExtractor(3, image_size=32)
        taps = extractor(torch.rand(2, 3, 32, 32))
        assert [t.shape[-1] for t in taps] == [16, 8, 4]
        assert len(taps) == 3

    def test_frozen_and_deterministic(self):
        a = PerceptualExtractor(2, image_size=16)
        b = PerceptualExtractor(2, image_size=16)
        assert state_bytes(a) == state_bytes(b)
        assert all(not p.requires_grad for p in a.parameters())
        assert not a.training

    def test_zero_taps_is_empty(self):
        extractor = PerceptualExtractor(0, image_size=16)
        assert extractor(torch.rand(1, 3, 16, 16)) == []

    def test_rejections(self):
        with pytest.raises(ValidationError):
            PerceptualExtractor(5, image_size=64)
        with pytest.raises(ValidationError):
            PerceptualExtractor(-1, image_size=64)
        with pytest.raises(ValidationError):
            PerceptualExtractor(4, image_size=8)
        extractor = PerceptualExtractor(1, image_size=16)
        with pytest.raises(ValidationError):
            extractor(torch.rand(2, 1, 16, 16))


class TestReconstructionLoss:
    def test_identical_inputs_zero(self):
        x = torch.rand(2, 3, 16, 16)
        extractor = PerceptualExtractor(2, image_size=16)
        assert reconstruction_loss(x, x.clone(), extractor).item() == 0.0

    def test_pure_l1_uniform_offset(self):
        x = torch.rand(2, 3, 16, 16)
        value = reconstruction_loss(x + 0.1, x, extractor=None)
        assert value.item() == pytest.approx(0.1, abs=1e-6)

    def test_identity_taps_triple_l1(self):
        # two taps that return the input unchanged: loss = L1 + 2 * L1
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
        y = x + 0.05
        value = reconstruction_loss(y, x, extractor=lambda im: [im, im])
        assert value.item() == pytest.approx(3 * 0.05, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            reconstruction_loss(torch.rand(1, 3, 16, 16),
                                torch.rand(1, 3, 8, 8))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.random((2, 3, 8, 8))
        b = rng.random((2, 3, 8, 8))
        total = 0.0
        for index in np.ndindex(a.shape):
            total += abs(a[index] - b[index])
        expected = total / a.size
        value = reconstruction_loss(torch.from_numpy(a), torch.from_numpy(b))
        assert value.item() == pytest.approx(expected, rel=1e-12)


class TestAdversarialLosses:
    def test_zero_logits_give_ln2(self):
        zeros = torch.zeros(4)
        assert d_logistic_loss(zeros, zeros).item() == pytest.approx(
            2 * LN2, abs=1e-6)
        assert g_nonsaturating_loss(zeros).item() == pytest.approx(
            LN2, abs=1e-6)

    def test_saturated_perfect_discriminator(self):
        real = torch.full((4,), 30.0)
        fake = torch.full((4,), -30.0)
        assert d_logistic_loss(real, fake).item() == pytest.approx(0.0, abs=1e-8)

    def test_r1_constant_discriminator_is_zero(self):
        class Constant(torch.nn.Module):
            def forward(self, x):
                return torch.zeros(x.shape[0]) + 0.0 * x.sum()

        value = r1_penalty(Constant(), torch.rand(3, 3, 8, 8), gamma=1.0)
        assert value.item() == pytest.approx(0.0, abs=1e-12)

    def test_r1_linear_discriminator_analytic(self):
        # D(x) = sum(c * x): grad wrt x is c everywhere, so the penalty is
        # (gamma/2) * c^2 * n_entries regardless of the input values
        c = 0.37
        gamma = 2.0

        class Linear(torch.nn.Module):
            def forward(self, x):
                return c * x.sum(dim=(1, 2, 3))

        x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        expected = (gamma / 2) * (c ** 2) * 3 * 4 * 4
        assert r1_penalty(Linear(), x, gamma).item() == pytest.approx(
            expected, rel=1e-12)


class TestDiscriminator:
    def test_logit_shape_and_determinism(self):
        torch.manual_seed(0)
        d = Discriminator(16, base=4, cap=16)
        x = torch.rand(3, 3, 16, 16)
        logits = d(x)
        assert logits.shape == (3,)
        torch.manual_seed(0)
        again = Discriminator(16, base=4, cap=16)
        assert state_bytes(d) == state_bytes(again)

    def test_input_validation(self):
        d = Discriminator(16, base=4, cap=16)
        with pytest.raises(ValidationError):
            d(torch.rand(2, 3, 8, 8))
        with pytest.raises(ValidationError):
            d(torch.rand(2, 16, 16))

    def test_noncontiguous_input_survives_r1(self):
        # permuted numpy-backed views crash this torch build's conv backward
        # unless the forward normalizes them
        d = Discriminator(16, base=4, cap=16)
        frames = np.random.default_rng(0).random(
            (2, 16, 16, 3), dtype=np.float32)
        real = torch.from_numpy(frames).permute(0, 3, 1, 2)
        value = r1_penalty(d, real, gamma=1.0)
        assert torch.isfinite(value)


class TestSyncLoss:
    def test_matches_direct_cosine(self):
        torch.manual_seed(1)
        model = SyncNet(16, d_sync=8)
        model.eval()
        clip = synthesize_clip(tiny_spec(), 0.8, seed=5, size=16)
        frames = torch.from_numpy(clip.frames[:5])
        slab_np = mel_slab(clip.mel, 0)
        frames_cf = frames.permute(0, 3, 1, 2)
        value = sync_loss(model, frames_cf, torch.from_numpy(slab_np.copy())[None])
        window = lower_half_window(clip.frames[:5], 0)
        expected = -sync_cosine(
            model.visual_embed(torch.from_numpy(window[None])),
            model.audio_embed(torch.from_numpy(slab_np.copy())[None]))
        assert value.item() == pytest.approx(expected.item(), abs=1e-6)
        assert -1.0 <= value.item() <= 1.0

    def test_wrong_window_length_rejected(self):
        model = SyncNet(16, d_sync=8)
        with pytest.raises(ValidationError):
            sync_loss(model, torch.rand(4, 3, 16, 16), torch.randn(1, 80, 16))


class TestLossBreakdown:
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
           st.floats(0, 20), st.floats(0, 5))
    @settings(max_examples=50, deadline=None)
    def test_decomposition_exact(self, l_rec, l_adv_g, l_sync, lam_r, lam_s):
        b = LossBreakdown(step=0, l_rec=l_rec, l_adv_g=l_adv_g, l_adv_d=0.0,
                          l_sync=l_sync, lambda_rec=lam_r, lambda_sync=lam_s)
        assert b.total_g == l_adv_g + lam_r * l_rec + lam_s * l_sync

    def test_tsv_round_trip(self):
        b = LossBreakdown(step=7, l_rec=0.25, l_adv_g=0.5, l_adv_d=1.25,
                          l_sync=-0.75, lambda_rec=10.0, lambda_sync=1.0)
        fields = b.tsv_line().split("\t")
        assert fields[0] == "7"
        assert float(fields[1]) == 0.25
        assert float(fields[5]) == b.total_g
        assert len(LossBreakdown.TSV_HEADER.split("\t")) == len(fields)


class TestTrainGeneralized:
    def test_zero_steps_equals_initialization(self):
        store = tiny_store()
        config = tiny_config(steps=0)
        result = train_generalized(store, config)
        fresh = build_backbone(config, config.seed)
        for module, twin in zip(
                result.backbone.modules_by_name().values(),
                fresh.modules_by_name().values()):
            assert state_bytes(module) == state_bytes(twin)
        assert result.history == []

    def test_missing_syncnet_rejected(self):
        with pytest.raises(TrainingError):
            train_generalized(tiny_store(), tiny_config(lambda_sync=1.0))

    def test_size_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            train_generalized(tiny_store(size=16),
                              tiny_config(image_size=32, d_audio=8))

    def test_reconstruction_improves(self):
        store = tiny_store(n_clips=2, seconds=1.2)
        result = train_generalized(store, tiny_config(steps=60))
        early = np.mean([b.l_rec for b in result.history[:10]])
        late = np.mean([b.l_rec for b in result.history[-10:]])
        assert late < early

    def test_deterministic_streams_and_state(self):
        store = tiny_store()
        a = train_generalized(store, tiny_config(steps=6))
        b = train_generalized(store, tiny_config(steps=6))
        assert [x.tsv_line() for x in a.history] == \
            [x.tsv_line() for x in b.history]
        for left, right in zip(a.backbone.modules_by_name().values(),
                               b.backbone.modules_by_name().values()):
            assert state_bytes(left) == state_bytes(right)
        assert state_bytes(a.discriminator) == state_bytes(b.discriminator)

    def test_syncnet_frozen_through_run(self):
        store = tiny_store()
        sync = train_syncnet(store, tiny_config(steps=0), steps=3).model
        before = state_bytes(sync)
        result = train_generalized(store, tiny_config(steps=4, lambda_sync=1.0),
                                   syncnet=sync)
        assert state_bytes(sync) == before
        assert any(b.l_sync != 0.0 for b in result.history)

    def test_lambda_sync_zero_logs_but_excludes(self):
        store = tiny_store()
        sync = train_syncnet(store, tiny_config(steps=0), steps=3).model
        result = train_generalized(store, tiny_config(steps=3, lambda_sync=0.0),
                                   syncnet=sync)
        for b in result.history:
            assert b.l_sync != 0.0
            assert b.total_g == b.l_adv_g + b.lambda_rec * b.l_rec

    def test_non_adversarial_run(self):
        store = tiny_store()
        result = train_generalized(store, tiny_config(steps=3,
                                                      adversarial=False))
        for b in result.history:
            assert b.l_adv_g == 0.0
            assert b.l_adv_d == 0.0
            assert b.total_g == pytest.approx(b.lambda_rec * b.l_rec)

    def test_decomposition_invariant_on_stream(self):
        store = tiny_store()
        stream = io.StringIO()
        result = train_generalized(store, tiny_config(steps=5),
                                   log_stream=stream)
        lines = stream.getvalue().strip().splitlines()
        assert lines[0] == LossBreakdown.TSV_HEADER
        assert len(lines) == 1 + 5
        for line, b in zip(lines[1:], result.history):
            fields = [float(v) for v in line.split("\t")[1:]]
            l_rec, l_adv_g, _, l_sync, total = fields
            assert abs(total - (l_adv_g + b.lambda_rec * l_rec
                                + b.lambda_sync * l_sync)) < 1e-6

    def test_nan_aborts_with_checkpoint(self, monkeypatch):
        store = tiny_store()
        calls = []

        def poisoned(pred, target, extractor=None):
            return torch.tensor(float("nan"), requires_grad=True)

        monkeypatch.setattr(training, "reconstruction_loss", poisoned)
        with pytest.raises(TrainingError):
            train_generalized(
                store, tiny_config(steps=3),
                on_checkpoint=lambda result, step, reason:
                    calls.append((step, reason)))
        assert calls == [(0, "abort")]

    def test_interval_checkpoints_fire(self):
        store = tiny_store()
        calls = []
        train_generalized(store, tiny_config(steps=5, checkpoint_interval=2),
                          on_checkpoint=lambda result, step, reason:
                              calls.append((step, reason)))
        assert calls == [(2, "interval"), (4, "interval")]

    def test_reference_outside_window(self):
        clip = synthesize_clip(tiny_spec(), 1.2, seed=1, size=16)  # 30 frames
        rng = np.random.default_rng(0)
        for _ in range(200):
            start, reference = training.sample_window(clip, rng)
            assert 0 <= start <= clip.n_frames - 5
            assert reference < start or reference >= start + 5

    def test_five_frame_clip_reference_falls_inside(self):
        clip = synthesize_clip(tiny_spec(), 0.2, seed=1, size=16)
        assert clip.n_frames == 5
        rng = np.random.default_rng(0)
        start, reference = training.sample_window(clip, rng)
        assert start == 0
        assert 0 <= reference < 5


class TestSyncObjectiveGradients:
    def test_bce_on_cosine_gradients(self):
        torch.manual_seed(2)
        model = SyncNet(16, d_sync=8).double()
        model.train()
        windows = torch.rand(4, 5, 8, 16, 3, dtype=torch.float64)
        slabs = torch.randn(4, 80, 16, dtype=torch.float64)
        labels = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)

        from lipsynth.syncnet import _bce_on_cosine

        def loss_fn():
            return _bce_on_cosine(model, windows, slabs, labels)

        named = {
            "visual_conv0": model.visual_tower[0].weight,
            "visual_bn0": model.visual_tower[1].weight,
            "visual_head": model.visual_head.weight,
            "audio_conv0": model.audio_tower[0].weight,
            "audio_head": model.audio_head.weight,
        }
        check_gradients(loss_fn, named, coords_per_param=2, tolerance=1e-4)

    def test_generated_window_sync_gradients(self):
        torch.manual_seed(3)
        model = SyncNet(16, d_sync=8).double()
        model.eval()
        frames = torch.rand(5, 3, 16, 16, dtype=torch.float64,
                            requires_grad=True)
        slab = torch.randn(1, 80, 16, dtype=torch.float64)

        def loss_fn():
            return sync_loss(model, frames, slab)

        check_gradients(loss_fn, {"frames": frames}, coords_per_param=4,
                        tolerance=1e-4)
