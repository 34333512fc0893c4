import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctmr import tensor as T
from ctmr.data import AugmentRanges, Manifest, make_phantom_corpus
from ctmr.fcn import (FcnConfig, FcnTrainer, fcn_forward, fcn_train_epoch, focal_loss, init_fcn,
                      predict_mask, scan_inputs, slice_dataset)
from ctmr.tensor import Tensor

TINY = dict(widths=(4, 8, 8), branch_width=4, head_width=8)


def bce(z, y):
    p = 1 / (1 + np.exp(-z))
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


@pytest.fixture
def dataset(rng):
    out = []
    for _ in range(4):
        x = rng.uniform(-1, 1, (5, 32, 32)).astype(np.float32)
        m = np.zeros((1, 32, 32), dtype=np.uint8)
        m[0, 10:18, 12:20] = 1
        x[:, m[0] == 1] += 0.7
        out.append((x, m))
    return out


class TestForward:
    def test_shape_at_desk_scale(self, rng):
        cfg = FcnConfig()
        with T.no_grad():
            out = fcn_forward(Tensor(rng.uniform(-1, 1, (1, 5, 64, 64))), init_fcn(cfg, 0), cfg)
        assert out.shape == (1, 1, 64, 64)

    def test_six_channel_mode(self, rng):
        cfg = FcnConfig(in_channels=6, **TINY)
        with T.no_grad():
            out = fcn_forward(Tensor(rng.uniform(-1, 1, (1, 6, 32, 32))), init_fcn(cfg, 0), cfg)
        assert out.shape == (1, 1, 32, 32) and cfg.mode == "FCN-CGAN"

    def test_channel_mismatch_names_both_modes(self):
        cfg = FcnConfig(**TINY)
        with pytest.raises(T.ShapeError, match=r"FCN model expects 5 .*FCN-CGAN input"):
            fcn_forward(Tensor(np.zeros((1, 6, 32, 32))), init_fcn(cfg, 0), cfg)

    def test_only_five_or_six_channels(self):
        with pytest.raises(ValueError):
            FcnConfig(in_channels=4)

    def test_zero_input_gives_bounded_logits(self):
        cfg = FcnConfig()
        with T.no_grad():
            out = fcn_forward(Tensor(np.zeros((1, 5, 64, 64))), init_fcn(cfg, 0), cfg).data
        assert np.all(np.isfinite(out)) and np.abs(out).max() < 100

    def test_parameter_names_carry_mode(self):
        assert all(n.startswith("fcn5.") for n in init_fcn(FcnConfig(**TINY), 0).names())
        assert all(n.startswith("fcn6.") for n in init_fcn(FcnConfig(in_channels=6, **TINY), 0).names())

    def test_translation_consistency_at_trunk_stride(self):
        """Shifting by the trunk stride (4) shifts logits by 4 on interior pixels.

        Uses a single global-pool bin: multi-bin pyramid pooling is position
        dependent by design, while the global branch is shift invariant.
        """
        cfg = FcnConfig(bins=(1,), **TINY)
        params = init_fcn(cfg, 1)
        # the trunk sees roughly 70 px in every direction, so the impulse and the
        # compared window sit in the middle of a 256 px field
        x = np.zeros((1, 5, 256, 256), dtype=np.float32)
        x[0, :, 126:130, 126:130] = 1.0
        shifted = np.roll(x, 4, axis=3)
        with T.no_grad():
            a = fcn_forward(Tensor(x), params, cfg).data[0, 0]
            b = fcn_forward(Tensor(shifted), params, cfg).data[0, 0]
        np.testing.assert_allclose(b[64:192, 68:196], a[64:192, 64:192], atol=1e-4)
        assert np.abs(a[64:192, 64:192]).max() > 0.1


class TestFocalLoss:
    def test_gamma_zero_alpha_half_is_half_bce(self, rng):
        z = rng.standard_normal((1, 1, 8, 8)) * 3
        y = (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float64)
        with T.precision(np.float64):
            got = focal_loss(Tensor(z), y, gamma=0, alpha=0.5).item()
        assert abs(got - 0.5 * bce(z, y).mean()) < 1e-6

    def test_single_pixel_closed_form(self):
        with T.precision(np.float64):
            got = focal_loss(Tensor([[[[0.0]]]]), np.ones((1, 1, 1, 1)), gamma=2, alpha=1).item()
        assert got == pytest.approx(0.25 * math.log(2), abs=1e-9)

    def test_confident_correct_prediction_vanishes(self):
        got = focal_loss(Tensor([[[[30.0, -30.0]]]], dtype=np.float64), np.array([[[[1, 0]]]])).item()
        assert got < 1e-12

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            focal_loss(Tensor(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            focal_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-15, 15), st.floats(0.01, 3), st.floats(0.01, 0.99), st.sampled_from([0, 1]))
    def test_non_negative_and_monotone_in_confidence(self, z, dz, alpha, label):
        sign = 1 if label else -1
        with T.precision(np.float64):
            lo = focal_loss(Tensor([[[[z]]]]), np.array([[[[label]]]]), 2.0, alpha).item()
            hi = focal_loss(Tensor([[[[z + sign * dz]]]]), np.array([[[[label]]]]), 2.0, alpha).item()
        assert lo >= 0 and hi >= 0
        assert hi <= lo


class TestPredictMask:
    def test_tie_goes_to_background(self):
        assert predict_mask(np.zeros((2, 2))).sum() == 0

    def test_strict_threshold(self):
        np.testing.assert_array_equal(predict_mask(np.array([-10.0, 1e-6, 3.0])), [0, 1, 1])
        assert predict_mask(np.full((4, 4), -10.0)).dtype == np.uint8


class TestTraining:
    def test_same_seed_identical_parameters(self, dataset):
        ranges = AugmentRanges()
        runs = []
        for _ in range(2):
            tr = FcnTrainer.create(FcnConfig(**TINY), seed=4)
            loss = fcn_train_epoch(tr, dataset, ranges, np.random.default_rng(9))
            runs.append((loss, tr.params.arrays()))
        assert runs[0][0] == runs[1][0]
        for k, v in runs[0][1].items():
            assert v.tobytes() == runs[1][1][k].tobytes()

    def test_zero_ranges_match_no_augmentation(self, dataset):
        losses = []
        for augment in (AugmentRanges.none(), None):
            tr = FcnTrainer.create(FcnConfig(**TINY), seed=4)
            rng = np.random.default_rng(2)
            losses.append([fcn_train_epoch(tr, dataset, augment, rng) for _ in range(2)])
        assert losses[0] == losses[1]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fcn_train_epoch(FcnTrainer.create(FcnConfig(**TINY), 0), [], None, np.random.default_rng(0))

    def test_channel_count_checked(self, dataset):
        tr = FcnTrainer.create(FcnConfig(in_channels=6, **TINY), 0)
        with pytest.raises(ValueError, match="6-channel"):
            fcn_train_epoch(tr, dataset, None, np.random.default_rng(0))

    def test_segment_is_slicewise(self, rng):
        tr = FcnTrainer.create(FcnConfig(**TINY), 0)
        vol = rng.uniform(-1, 1, (5, 3, 32, 32)).astype(np.float32)
        seg = tr.segment(vol)
        assert seg.shape == (1, 3, 32, 32) and seg.dtype == np.uint8
        np.testing.assert_array_equal(seg[0, 1], predict_mask(tr.predict_logits(vol[:, 1]))[0])

    def test_scan_inputs_modes(self, tmp_path):
        m = Manifest.load(make_phantom_corpus(1, 1, 32, (2, 2), seed=0, out_dir=tmp_path))
        rec = m.load_all()[0]
        assert scan_inputs(rec, None, FcnConfig(**TINY)).shape == (5, 2, 32, 32)
        six = scan_inputs(rec, rec.dwi, FcnConfig(in_channels=6, **TINY))
        assert six.shape == (6, 2, 32, 32)
        np.testing.assert_array_equal(six[5], rec.dwi[0])
        with pytest.raises(ValueError):
            scan_inputs(rec, None, FcnConfig(in_channels=6, **TINY))
        pairs = slice_dataset([rec], {rec.scan_id: rec.ctp})
        assert len(pairs) == 2 and pairs[1][1].shape == (1, 32, 32)


@pytest.mark.slow
def test_thirty_epochs_halve_training_loss(tmp_path):
    manifest = Manifest.load(make_phantom_corpus(20, 1, 64, (2, 2), seed=1, out_dir=tmp_path))
    records = manifest.load_all()
    data = slice_dataset(records, {r.scan_id: r.ctp for r in records})
    trainer = FcnTrainer.create(FcnConfig(), seed=0)
    rng = np.random.default_rng(0)
    losses = [fcn_train_epoch(trainer, data, AugmentRanges(), rng) for _ in range(30)]
    assert losses[-1] <= 0.5 * losses[0]
