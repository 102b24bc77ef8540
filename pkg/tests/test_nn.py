import numpy as np
import pytest

from medsynth import nn
from medsynth import tensor as T
from medsynth.errors import (CheckpointError, CorruptCheckpointError, DomainError, InvalidShapeError,
                             InvalidSpecError, UnsupportedVersionError)
from medsynth.nn import ParameterStore
from medsynth.tensor import Tensor

from conftest import numeric_grad, rel_err


def small_net():
    return [nn.conv("c0", 2, 4, kernel=3, stride=1, padding=1), nn.bn("b0", 4), nn.act("a0", "leaky_relu"),
            nn.conv("c1", 4, 4), nn.act("a1", "relu"), nn.conv_t("u0", 4, 4), nn.skip("s0", "a0", 8),
            nn.conv("head", 8, 1, kernel=1, stride=1, padding=0), nn.act("p", "sigmoid")]


class TestInit:
    def test_counts_and_stats(self):
        store = nn.init_params([nn.conv("c", 4, 8, kernel=3)], seed=11)
        w, b = store["c.weight"].data, store["c.bias"].data
        assert w.shape == (8, 4, 3, 3) and w.size == 288 and b.size == 8
        assert np.all(b == 0)
        # sample mean of 288 N(0, 0.02^2) draws lies within 3 standard errors of 0
        assert abs(w.mean()) < 3 * 0.02 / np.sqrt(288)
        assert 0.015 < w.std() < 0.025

    def test_deterministic(self):
        a, b = nn.init_params(small_net(), 5), nn.init_params(small_net(), 5)
        assert list(a.params) == list(b.params)
        for k in a.params:
            assert a[k].data.tobytes() == b[k].data.tobytes()
        assert nn.checkpoint_bytes(a) == nn.checkpoint_bytes(b)

    def test_seed_changes_weights(self):
        a, b = nn.init_params(small_net(), 5), nn.init_params(small_net(), 6)
        assert not np.array_equal(a["c0.weight"].data, b["c0.weight"].data)

    def test_empty(self):
        store = nn.init_params([], 0)
        assert len(store) == 0 and store.n_elements() == 0

    def test_batch_norm_params(self):
        store = nn.init_params([nn.bn("b", 3)], 0, in_channels=3)
        np.testing.assert_array_equal(store["b.gamma"].data, 1.0)
        np.testing.assert_array_equal(store["b.beta"].data, 0.0)
        np.testing.assert_array_equal(store.buffers["b.running_var"], 1.0)

    def test_channel_mismatch_names_layer(self):
        layers = [nn.conv("first", 1, 4), nn.conv("second", 3, 8)]
        with pytest.raises(InvalidSpecError, match="second"):
            nn.init_params(layers, 0, in_channels=1)

    def test_unknown_network_kind(self):
        with pytest.raises(InvalidSpecError):
            ParameterStore("transformer", 0)


class TestShapes:
    def test_infer(self):
        shapes = nn.infer_shapes(small_net(), (2, 8, 8))
        assert shapes[0] == (4, 8, 8) and shapes[3] == (4, 4, 4) and shapes[6] == (8, 8, 8)
        assert shapes[-1] == (1, 8, 8)

    def test_spatial_mismatch(self):
        layers = [nn.conv("c0", 1, 2), nn.conv("c1", 2, 2), nn.skip("s", "c0", 4)]
        with pytest.raises(InvalidSpecError, match="s"):
            nn.infer_shapes(layers, (1, 16, 16))

    def test_kernel_too_large(self):
        with pytest.raises(InvalidSpecError, match="c1"):
            nn.infer_shapes([nn.conv("c0", 1, 2), nn.conv("c1", 2, 2, kernel=5, padding=0)], (1, 4, 4))

    def test_spec_roundtrip(self):
        for layer in small_net():
            assert nn.LayerSpec.from_dict(layer.to_dict()) == layer


class TestBatchNorm:
    def test_constant_channel_is_zero(self):
        x = np.full((2, 1, 3, 3), 4.2)
        out = nn.batch_norm(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_affine_shift(self, rng):
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = nn.batch_norm(x, np.ones(3), np.full(3, 5.0), np.zeros(3), np.ones(3))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 5.0, atol=1e-10)

    def test_running_stats(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        nn.batch_norm(x, np.ones(2), np.zeros(2), rm, rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_eval_uses_running_stats(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        out = nn.batch_norm(x, np.ones(2), np.zeros(2), rm.copy(), rv.copy(), train=False)
        expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + nn.BN_EPS)
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_too_few_values(self):
        with pytest.raises(DomainError):
            nn.batch_norm(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))

    @pytest.mark.parametrize("train", [True, False])
    def test_gradient(self, rng, train):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        gamma = Tensor(rng.normal(size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        weights = rng.normal(size=(2, 3, 4, 4))

        def f():
            out = nn.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=train)
            return float(np.sum(out.data * weights))

        (nn.batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=train) * weights).sum().backward()
        for p in (x, gamma, beta):
            assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-4


class TestConcatSkip:
    def test_shape(self):
        assert nn.concat_skip(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4))).shape == (1, 5, 4, 4)

    def test_select_recovers_input(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        cat = nn.concat_skip(x, np.zeros((1, 3, 4, 4)))
        w = np.zeros((2, 5, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(cat, w, np.zeros(2)).data, x)

    def test_spatial_mismatch(self):
        with pytest.raises(InvalidShapeError):
            nn.concat_skip(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)))

    def test_gradient_split(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 3, 3)), requires_grad=True)
        weights = rng.normal(size=(1, 5, 3, 3))
        (nn.concat_skip(a, b) * weights).sum().backward()
        np.testing.assert_array_equal(a.grad, weights[:, :2])
        np.testing.assert_array_equal(b.grad, weights[:, 2:])
        f = lambda: float(np.sum(nn.concat_skip(a.data, b.data).data * weights))
        assert rel_err(a.grad, numeric_grad(f, a.data)) < 1e-6


class TestRun:
    def test_forward_and_dropout(self, rng):
        layers = [nn.conv("c", 1, 2, kernel=3, stride=1, padding=1), nn.dropout("d", 0.5)]
        store = nn.init_params(layers, 0, in_channels=1)
        x = rng.normal(size=(1, 1, 4, 4))
        a = nn.run(store, x).data
        np.testing.assert_array_equal(a, nn.run(store, x).data)
        dropped = nn.run(store, x, rng=np.random.default_rng(0)).data
        kept = dropped != 0
        np.testing.assert_allclose(dropped[kept], 2.0 * a[kept])
        assert 0 < kept.mean() < 1


class TestCheckpoint:
    def trained_store(self, rng):
        store = nn.init_params(small_net(), 3, in_channels=2)
        nn.run(store, rng.normal(size=(2, 2, 8, 8)))  # moves running stats off their defaults
        return store

    def test_roundtrip_bit_exact(self, tmp_path, rng):
        store = self.trained_store(rng)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nn.save_checkpoint(store, p1)
        loaded = nn.load_checkpoint(p1)
        nn.save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.seed == 3 and loaded.network_kind == "toy"
        for k, v in store.buffers.items():
            assert v.tobytes() == loaded.buffers[k].tobytes()
        x = rng.normal(size=(2, 2, 8, 8))
        assert nn.run(store, x, train=False).data.tobytes() == nn.run(loaded, x, train=False).data.tobytes()

    def test_truncated(self, tmp_path, rng):
        blob = nn.checkpoint_bytes(self.trained_store(rng))
        for cut in (3, 10, len(blob) - 8):
            path = tmp_path / f"t{cut}.ckpt"
            path.write_bytes(blob[:cut])
            with pytest.raises(CorruptCheckpointError):
                nn.load_checkpoint(path)

    def test_version_mismatch(self, rng):
        blob = nn.checkpoint_bytes(self.trained_store(rng))
        bumped = blob.replace(b'"format_version":1', b'"format_version":9')
        with pytest.raises(UnsupportedVersionError):
            nn.checkpoint_from_bytes(bumped)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            nn.load_checkpoint(tmp_path / "nope.ckpt")
