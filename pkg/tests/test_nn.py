import numpy as np
import pytest

from ctmr import nn
from ctmr import tensor as T
from ctmr.cgan import GeneratorConfig, generator_forward, init_generator
from ctmr.nn import AdamState, ParamSet, adam_step, init_params, load_checkpoint, save_checkpoint
from ctmr.tensor import Tensor


@pytest.fixture
def small_params():
    return init_params([("conv", "a", 3, 4, 3), ("conv_transpose", "b", 4, 2, 3)], seed=7)


class TestInit:
    def test_biases_start_at_zero(self, small_params):
        assert not small_params["a.bias"].data.any() and not small_params["b.bias"].data.any()

    def test_weight_statistics(self):
        w = init_params([("conv", "big", 100, 100, 1)], seed=0)["big.weight"].data
        assert w.size == 10_000
        assert abs(w.mean()) < 0.002
        assert abs(w.std() - 0.02) < 0.002

    def test_same_seed_identical(self, small_params):
        again = init_params([("conv", "a", 3, 4, 3), ("conv_transpose", "b", 4, 2, 3)], seed=7)
        for (n1, t1), (n2, t2) in zip(small_params, again):
            assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()

    def test_transpose_weight_layout(self, small_params):
        assert small_params["a.weight"].shape == (4, 3, 3, 3)
        assert small_params["b.weight"].shape == (4, 2, 3, 3)

    def test_duplicate_names_rejected(self):
        p = ParamSet()
        p.add("w", Tensor([1.0]))
        with pytest.raises(nn.DuplicateNameError):
            p.add("w", Tensor([2.0]))


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = ParamSet([("w", Tensor([1.0]))])
        p["w"].grad = np.array([2.0], dtype=np.float32)
        adam_step(p, AdamState())
        assert p["w"].data[0] == pytest.approx(0.9998, abs=1e-7)

    def test_zero_gradient_leaves_parameter(self):
        p = ParamSet([("w", Tensor([1.0, -3.0]))])
        p["w"].grad = np.zeros(2, dtype=np.float32)
        adam_step(p, AdamState())
        np.testing.assert_array_equal(p["w"].data, [1.0, -3.0])

    def test_matches_reference_recurrence(self, rng):
        """Fifty steps on (w - 3)^2 against a scalar float64 transcription of the update."""
        p = ParamSet([("w", Tensor([0.0], dtype=np.float64))])
        state = AdamState(lr=0.1, beta1=0.9, beta2=0.999)
        w, m, v = 0.0, 0.0, 0.0
        for t in range(1, 51):
            p.zero_grad()
            T.backward(((p["w"] - 3.0) * (p["w"] - 3.0)).sum())
            adam_step(p, state)
            g = 2 * (w - 3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-9)
        assert state.t == 50

    def test_convex_quadratic_decreases_monotonically(self, rng):
        target = rng.standard_normal(10)
        scales = rng.uniform(0.5, 2.0, 10)
        p = ParamSet([("w", Tensor(np.zeros(10), dtype=np.float64))])
        state = AdamState(lr=0.01)
        losses = []
        for _ in range(100):
            p.zero_grad()
            d = p["w"] - Tensor(target)
            loss = (d * d * Tensor(scales)).sum()
            losses.append(loss.item())
            T.backward(loss)
            adam_step(p, state)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_missing_gradient_raises_before_any_update(self):
        p = ParamSet([("a", Tensor([1.0])), ("b", Tensor([1.0]))])
        p["a"].grad = np.ones(1, dtype=np.float32)
        state = AdamState()
        with pytest.raises(nn.MissingGradientError, match="b"):
            adam_step(p, state)
        assert p["a"].data[0] == 1.0 and state.t == 0


class TestCheckpoint:
    def test_round_trip_with_optimizer(self, small_params, tmp_path):
        state = AdamState(lr=1e-3, beta1=0.5, beta2=0.999, t=3)
        for name, t in small_params:
            t.grad = np.full(t.shape, 0.5, dtype=np.float32)
        adam_step(small_params, state)
        save_checkpoint(small_params, tmp_path / "c.ckpt", state)
        params, loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert params.names() == small_params.names()
        for (_, a), (_, b) in zip(params, small_params):
            assert a.data.tobytes() == b.data.tobytes()
        assert (loaded.lr, loaded.beta1, loaded.beta2, loaded.eps, loaded.t) == (1e-3, 0.5, 0.999, 1e-8, 4)
        for name in small_params.names():
            assert loaded.m[name].tobytes() == state.m[name].tobytes()
            assert loaded.v[name].tobytes() == state.v[name].tobytes()

    def test_parameters_only(self, small_params, tmp_path):
        save_checkpoint(small_params, tmp_path / "p.ckpt")
        _, state = load_checkpoint(tmp_path / "p.ckpt")
        assert state is None

    def test_corrupted_magic(self, small_params, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(small_params, path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(nn.FormatError, match="magic"):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [3, 10, 40, -1])
    def test_truncation(self, small_params, tmp_path, cut):
        path = tmp_path / "c.ckpt"
        save_checkpoint(small_params, path)
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(nn.TruncatedError):
            load_checkpoint(path)

    def test_duplicate_name_in_file(self, tmp_path):
        import io
        buf = io.BytesIO()
        arr = np.ones(2, dtype=np.float32)
        nn._write_block(buf, nn.MAGIC, [("w", arr), ("w", arr)])
        (tmp_path / "d.ckpt").write_bytes(buf.getvalue())
        with pytest.raises(nn.DuplicateNameError):
            load_checkpoint(tmp_path / "d.ckpt")

    def test_reloaded_generator_gives_identical_output(self, tmp_path, rng):
        cfg = GeneratorConfig(base_width=4, n_resnet_blocks=1, image_size=16)
        params = init_generator(cfg, seed=2)
        save_checkpoint(params, tmp_path / "g.ckpt")
        loaded, _ = load_checkpoint(tmp_path / "g.ckpt")
        x = Tensor(rng.uniform(-1, 1, (1, 5, 16, 16)))
        with T.no_grad():
            a = generator_forward(x, params, cfg, dropout_active=False).data
            b = generator_forward(x, loaded, cfg, dropout_active=False).data
        assert a.tobytes() == b.tobytes()

    def test_schema_mismatch_on_load(self, small_params):
        other = init_params([("conv", "a", 3, 4, 3)], seed=7)
        with pytest.raises(nn.SchemaError):
            small_params.load_arrays(other)
        wrong_shape = init_params([("conv", "a", 3, 5, 3), ("conv_transpose", "b", 4, 2, 3)], seed=7)
        with pytest.raises(nn.SchemaError, match="shape"):
            small_params.load_arrays(wrong_shape)
