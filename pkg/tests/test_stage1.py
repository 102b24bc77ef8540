import math

import numpy as np
import pytest

from medsynth import stage1
from medsynth.errors import ConfigError, ContractError, InvalidShapeError
from medsynth.optim import TrainConfig
from medsynth.segmenter import has_fully_connected
from medsynth.tensor import grad_check

from conftest import well_conditioned


def cfg16(**kw):
    return TrainConfig(image_size=16, noise_dim=8, **kw)


class TestLosses:
    def test_equilibrium(self):
        half = np.full(4, 0.5)
        assert abs(stage1.d1_loss(half, half).item() - 2 * math.log(2)) < 1e-6
        assert abs(stage1.g1_loss(half).item() - math.log(2)) < 1e-6
        assert abs(stage1.g1_loss(half, saturating=True).item() + math.log(2)) < 1e-6

    def test_perfect_discriminator(self):
        v = stage1.d1_loss([1 - 1e-7], [1e-7]).item()
        assert 0 < v < 3e-7

    def test_hand_value(self):
        # -(1/2)[(ln .9 + ln .8) + (ln .8 + ln .7)]
        v = stage1.d1_loss([0.9, 0.8], [0.2, 0.3]).item()
        assert v == pytest.approx(0.4541612811, abs=1e-9)

    def test_non_saturating_hand_value(self):
        assert stage1.g1_loss([0.25, 0.75]).item() == pytest.approx(0.8369882, abs=1e-6)

    def test_saturating_decreases(self):
        vals = [stage1.g1_loss([p], saturating=True).item() for p in (0.1, 0.4, 0.7, 0.95)]
        assert all(v <= 0 for v in vals) and vals == sorted(vals, reverse=True)

    def test_clamped_extremes_are_finite(self):
        assert np.isfinite(stage1.d1_loss([0.0], [1.0]).item())

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            stage1.d1_loss([0.5, 0.5], [0.5])

    def test_empty(self):
        with pytest.raises(ContractError):
            stage1.g1_loss(np.zeros(0))


class TestNetworks:
    def test_generator_contract(self):
        g = stage1.init_g1(TrainConfig())
        z = np.random.default_rng(0).standard_normal((2, 64))
        out = stage1.g1_forward(z, g)
        assert out.shape == (2, 1, 32, 32)
        assert out.data.min() >= 0 and out.data.max() <= 1
        np.testing.assert_array_equal(out.data, stage1.g1_forward(z, g).data)

    def test_untrained_output_mid_range(self):
        cfg = cfg16()
        for seed in range(100):
            g = stage1.init_g1(cfg, base_channels=4, seed=seed)
            z = np.random.default_rng(seed).standard_normal((2, 8))
            assert 0.2 < stage1.g1_forward(z, g).data.mean() < 0.8

    def test_unreachable_size(self):
        with pytest.raises(ConfigError):
            stage1.g1_layers(image_size=24)

    def test_discriminator_contract(self):
        d = stage1.init_d1(TrainConfig())
        x = np.random.default_rng(0).random((3, 1, 32, 32))
        out = stage1.d1_forward(x, d)
        assert out.shape == (3,) and np.all((out.data > 0) & (out.data < 1))
        np.testing.assert_array_equal(out.data, stage1.d1_forward(x, d).data)
        with pytest.raises(InvalidShapeError):
            stage1.d1_forward(np.zeros((3, 1, 16, 16)), d)

    def test_heads(self):
        assert has_fully_connected(stage1.d1_layers(32, head="linear"))
        assert not has_fully_connected(stage1.d1_layers(32, head="conv"))
        d = stage1.init_d1(TrainConfig(), head="conv")
        assert stage1.d1_forward(np.zeros((2, 1, 32, 32)), d).shape == (2,)

    def test_kernel_five(self):
        layers = stage1.d1_layers(32, kernel=5)
        assert layers[0].kernel == 5 and layers[0].padding == 2

    def test_first_bn_optional(self):
        names = [l.name for l in stage1.d1_layers(32, first_bn=False)]
        assert "down0_bn" not in names and "down1_bn" in names

    def test_noise_shape(self):
        with pytest.raises(InvalidShapeError):
            stage1.g1_forward(np.zeros((2, 7)), stage1.init_g1(TrainConfig()))


class TestGradients:
    def setup_method(self):
        cfg = cfg16()
        self.g = well_conditioned(stage1.init_g1(cfg, base_channels=4))
        self.d = well_conditioned(stage1.init_d1(cfg, base_channels=4))
        rng = np.random.default_rng(3)
        self.z = rng.standard_normal((2, 8))
        self.real = rng.random((2, 1, 16, 16))

    def params(self):
        return [p for _, p in self.g] + [p for _, p in self.d]

    def test_discriminator_loss(self):
        f = lambda: stage1.d1_loss(stage1.d1_forward(self.real, self.d),
                                   stage1.d1_forward(stage1.g1_forward(self.z, self.g), self.d))
        report = grad_check(f, self.params())
        assert report.passed, report

    def test_generator_loss(self):
        f = lambda: stage1.g1_loss(stage1.d1_forward(stage1.g1_forward(self.z, self.g), self.d))
        assert grad_check(f, self.params()).passed

    def test_discriminator_mean_output(self):
        from medsynth import tensor as T
        f = lambda: T.reduce_mean(stage1.d1_forward(self.real, self.d))
        assert grad_check(f, [p for _, p in self.d]).passed


class TestSampling:
    def test_counts(self):
        g = stage1.init_g1(cfg16(), base_channels=4)
        assert stage1.sample_masks(g, 0, seed=1) == []
        masks = stage1.sample_masks(g, 100, seed=1)
        assert len(masks) == 100 and masks[0].shape == (1, 16, 16)

    def test_deterministic(self):
        g = stage1.init_g1(cfg16(), base_channels=4)
        a = np.stack(stage1.sample_masks(g, 5, seed=2))
        assert a.tobytes() == np.stack(stage1.sample_masks(g, 5, seed=2)).tobytes()
        assert a.tobytes() != np.stack(stage1.sample_masks(g, 5, seed=3)).tobytes()

    def test_binarize(self):
        np.testing.assert_array_equal(stage1.binarize(np.array([0.2, 0.5, 0.51])), [0, 0, 1])


def test_train_gan_smoke_and_determinism():
    cfg = cfg16(epochs=2, batch_size=4, seed=5)
    images = (np.random.default_rng(0).random((8, 1, 16, 16)) > 0.7).astype(float)
    runs = [stage1.train_gan(images, cfg, g_base=4, d_base=4, instance_noise=0.1) for _ in range(2)]
    assert runs[0][2] == runs[1][2] and len(runs[0][2]["d_loss"]) == 2
    assert all(np.isfinite(runs[0][2]["g_loss"]))
    a, b = runs[0][0], runs[1][0]
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.params)


def test_train_gan_rejects_negative_noise():
    with pytest.raises(ConfigError):
        stage1.train_gan(np.zeros((4, 1, 16, 16)), cfg16(batch_size=2), instance_noise=-0.1)
