import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctmr import cgan
from ctmr import tensor as T
from ctmr.cgan import (CGAN, DiscriminatorConfig, GeneratorConfig, d_loss, discriminator_forward,
                       g_adv_loss, g_total_loss, generator_forward, init_discriminator, init_generator,
                       l1_loss, patch_map_size, receptive_field)
from ctmr.tensor import Tensor

SMALL_G = GeneratorConfig(base_width=4, n_resnet_blocks=1, image_size=32)
SMALL_D = DiscriminatorConfig(widths=[4, 8, 8, 8])


def log_sigmoid_scalar(z):
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


@pytest.fixture
def pair(rng):
    x = rng.uniform(-1, 1, (1, 5, 32, 32)).astype(np.float32)
    y = rng.uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32)
    return x, y


class TestShapes:
    def test_paper_scale_map_is_30(self):
        cfg = DiscriminatorConfig()
        assert patch_map_size(256, cfg) == 30
        assert receptive_field(cfg) == 70

    def test_unpadded_variant_has_single_patch_at_70(self):
        cfg = DiscriminatorConfig(padding=0)
        assert receptive_field(cfg) == 70
        assert patch_map_size(70, cfg) == 1

    @pytest.mark.parametrize("s", [32, 64, 96, 128, 256])
    def test_map_side_law(self, s):
        assert patch_map_size(s, DiscriminatorConfig()) == s // 8 - 2

    def test_discriminator_forward_map(self, rng):
        params = init_discriminator(SMALL_D, 0)
        with T.no_grad():
            m, score = discriminator_forward(Tensor(rng.uniform(-1, 1, (1, 5, 64, 64))),
                                             Tensor(rng.uniform(-1, 1, (1, 1, 64, 64))), params, SMALL_D)
        assert m.shape == (1, 1, 6, 6)
        assert score.item() == pytest.approx(float(m.data.mean()), abs=1e-6)

    def test_norm_excluded_on_first_and_last_conv(self):
        params = init_discriminator(DiscriminatorConfig(), 0)
        assert {"d.c1.bias", "d.c5.bias"} <= set(params.names())
        assert not any(f"d.c{i}.bias" in params for i in (2, 3, 4))

    def test_desk_scale_generator_shape(self, rng):
        cfg = GeneratorConfig(base_width=8, n_resnet_blocks=2, image_size=64)
        with T.no_grad():
            out = generator_forward(Tensor(rng.uniform(-1, 1, (1, 5, 64, 64))), init_generator(cfg, 0), cfg)
        assert out.shape == (1, 1, 64, 64)
        assert np.abs(out.data).max() <= 1.0

    def test_paper_scale_generator_width_stays_constant_in_blocks(self):
        params = init_generator(GeneratorConfig(), 0)
        assert params["g.res0.conv1.weight"].shape == (256, 256, 3, 3)
        assert params["g.res8.conv2.weight"].shape == (256, 256, 3, 3)
        assert "g.res9.conv1.weight" not in params

    def test_rejects_wrong_channels_and_sizes(self):
        p = init_generator(SMALL_G, 0)
        with pytest.raises(T.ShapeError):
            generator_forward(Tensor(np.zeros((1, 6, 32, 32))), p, SMALL_G)
        with pytest.raises(T.ShapeError):
            generator_forward(Tensor(np.zeros((1, 5, 30, 30))), p, SMALL_G)
        d = init_discriminator(SMALL_D, 0)
        with pytest.raises(T.ShapeError):
            discriminator_forward(Tensor(np.zeros((1, 5, 32, 32))), Tensor(np.zeros((1, 1, 16, 16))), d, SMALL_D)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            GeneratorConfig(image_size=30)
        with pytest.raises(ValueError):
            GeneratorConfig(n_resnet_blocks=0)


class TestGeneratorNoise:
    def test_seeds_control_dropout(self, pair):
        params = init_generator(SMALL_G, 0)
        x = Tensor(pair[0])
        with T.no_grad():
            a = generator_forward(x, params, SMALL_G, True, seed=1).data
            b = generator_forward(x, params, SMALL_G, True, seed=2).data
            c = generator_forward(x, params, SMALL_G, True, seed=1).data
        assert not np.array_equal(a, b)
        assert a.tobytes() == c.tobytes()

    def test_pure_function_without_dropout(self, pair):
        params = init_generator(SMALL_G, 0)
        x = Tensor(pair[0])
        with T.no_grad():
            a = generator_forward(x, params, SMALL_G, False, seed=1).data
            b = generator_forward(x, params, SMALL_G, False, seed=99).data
        assert a.tobytes() == b.tobytes()


class TestLosses:
    def test_zero_logits(self):
        z = Tensor(np.zeros((1, 1, 30, 30)), dtype=np.float64)
        assert d_loss(z, z).item() == pytest.approx(2 * math.log(2), abs=1e-6)
        assert g_adv_loss(z).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_discriminator_limit(self):
        real = Tensor(np.full((1, 1, 4, 4), 50.0))
        fake = Tensor(np.full((1, 1, 4, 4), -50.0))
        assert d_loss(real, fake).item() < 1e-12

    def test_elementwise_oracle(self, rng):
        r = rng.standard_normal((1, 1, 6, 6)) * 3
        f = rng.standard_normal((1, 1, 6, 6)) * 3
        ref_d = -np.mean([log_sigmoid_scalar(v) for v in r.ravel()]) \
            - np.mean([log_sigmoid_scalar(-v) for v in f.ravel()])
        ref_g = -np.mean([log_sigmoid_scalar(v) for v in f.ravel()])
        with T.precision(np.float64):
            assert abs(d_loss(Tensor(r), Tensor(f)).item() - ref_d) < 1e-6
            assert abs(g_adv_loss(Tensor(f)).item() - ref_g) < 1e-6

    def test_total_with_lambda_100(self):
        with T.precision(np.float64):
            fake_map = Tensor(np.zeros((1, 1, 4, 4)))
            target = Tensor(np.zeros((1, 1, 8, 8)))
            gen = Tensor(np.full((1, 1, 8, 8), 0.01))
            assert g_total_loss(fake_map, gen, target, 100).item() == pytest.approx(math.log(2) + 1.0, abs=1e-6)
            assert g_total_loss(fake_map, target, target, 100).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_lambda_zero_is_pure_adversarial(self, rng):
        fm = Tensor(rng.standard_normal((1, 1, 4, 4)))
        gen, tgt = Tensor(rng.standard_normal((1, 1, 8, 8))), Tensor(rng.standard_normal((1, 1, 8, 8)))
        assert g_total_loss(fm, gen, tgt, 0.0).item() == g_adv_loss(fm).item()

    def test_l1_shape_mismatch_and_negative_lambda(self):
        with pytest.raises(T.ShapeError):
            l1_loss(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))
        with pytest.raises(ValueError):
            g_total_loss(Tensor([0.0]), Tensor([0.0]), Tensor([0.0]), -1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=16))
    def test_losses_non_negative(self, logits):
        t = Tensor(np.array(logits), dtype=np.float64)
        assert d_loss(t, t).item() >= 0 and g_adv_loss(t).item() >= 0


class TestTrainStep:
    def test_step_count_and_finite_losses(self, pair):
        model = CGAN.create(SMALL_G, SMALL_D, seed=0)
        ld, lg = model.train_step(*pair, seed=0)
        assert math.isfinite(ld) and math.isfinite(lg)
        assert model.g_adam.t == 1 and model.d_adam.t == 1

    def test_hyperparameters_default(self):
        model = CGAN.create(SMALL_G, SMALL_D)
        assert (model.g_adam.lr, model.g_adam.beta1, model.g_adam.beta2, model.lam) == (2e-4, 0.5, 0.999, 100.0)

    def test_discriminator_step_leaves_generator_untouched(self, pair):
        model = CGAN.create(SMALL_G, SMALL_D, seed=0)
        g_before = {k: v.copy() for k, v in model.g_params.arrays().items()}
        d_before = {k: v.copy() for k, v in model.d_params.arrays().items()}
        x, y = Tensor(pair[0]), Tensor(pair[1])
        fake = generator_forward(x, model.g_params, SMALL_G, seed=0)
        with cgan.frozen(model.g_params):
            rm, _ = discriminator_forward(x, y, model.d_params, SMALL_D)
            fm, _ = discriminator_forward(x, fake.detach(), model.d_params, SMALL_D)
            ld = d_loss(rm, fm)
        T.backward(ld)
        assert all(t.grad is None for _, t in model.g_params)
        from ctmr.nn import adam_step
        adam_step(model.d_params, model.d_adam)
        for k, v in model.g_params.arrays().items():
            assert v.tobytes() == g_before[k].tobytes()
        assert any(not np.array_equal(v, d_before[k]) for k, v in model.d_params.arrays().items())

    def test_generator_step_leaves_discriminator_untouched(self, pair):
        model = CGAN.create(SMALL_G, SMALL_D, seed=0)
        x, y = Tensor(pair[0]), Tensor(pair[1])
        d_before = {k: v.copy() for k, v in model.d_params.arrays().items()}
        fake = generator_forward(x, model.g_params, SMALL_G, seed=0)
        with cgan.frozen(model.d_params):
            fm, _ = discriminator_forward(x, fake, model.d_params, SMALL_D)
            lg = g_total_loss(fm, fake, y)
        T.backward(lg)
        assert all(t.grad is None for _, t in model.d_params)
        assert all(t.grad is not None for _, t in model.g_params)
        for k, v in model.d_params.arrays().items():
            assert v.tobytes() == d_before[k].tobytes()

    def test_deterministic(self, pair):
        a = CGAN.create(SMALL_G, SMALL_D, seed=3)
        b = CGAN.create(SMALL_G, SMALL_D, seed=3)
        for s in range(3):
            assert a.train_step(*pair, seed=s) == b.train_step(*pair, seed=s)
        for (n, p), (_, q) in zip(a.g_params, b.g_params):
            assert p.data.tobytes() == q.data.tobytes(), n

    def test_nan_names_first_nonfinite_tensor(self, pair):
        model = CGAN.create(SMALL_G, SMALL_D, seed=0)
        model.d_params["d.c1.weight"].data[0, 0, 0, 0] = np.nan
        with pytest.raises(cgan.NonFiniteLossError, match=r"discriminator loss .*parameter d\.c1\.weight"):
            model.train_step(*pair, seed=0)

    def test_nan_in_activation_names_the_op(self):
        x = T.Tensor([1.0, -1.0], requires_grad=True)
        loss = T.mean(T.log(x))
        with pytest.raises(cgan.NonFiniteLossError, match="first non-finite tensor: log"):
            cgan._require_finite(loss, "probe")

    def test_batch_size_one_enforced(self):
        model = CGAN.create(SMALL_G, SMALL_D)
        with pytest.raises(T.ShapeError):
            model.train_step(np.zeros((2, 5, 32, 32)), np.zeros((2, 1, 32, 32)), seed=0)

    def test_short_overfit_reduces_l1(self, pair):
        model = CGAN.create(GeneratorConfig(base_width=8, n_resnet_blocks=1, image_size=32), SMALL_D, seed=0)
        x, y = pair
        y = np.clip(x[:, :1] * 0.5, -1, 1)  # a learnable target
        before = np.abs(model.generate(x, False) - y).mean()
        for s in range(40):
            model.train_step(x, y, seed=s)
        assert np.abs(model.generate(x, False) - y).mean() < 0.5 * before


@pytest.mark.slow
def test_paper_scale_generator_under_ten_seconds(rng):
    cfg = GeneratorConfig()
    params = init_generator(cfg, 0)
    x = Tensor(rng.uniform(-1, 1, (1, 5, 256, 256)))
    t0 = time.perf_counter()
    with T.no_grad():
        out = generator_forward(x, params, cfg)
    assert time.perf_counter() - t0 < 10
    assert out.shape == (1, 1, 256, 256) and np.abs(out.data).max() <= 1
