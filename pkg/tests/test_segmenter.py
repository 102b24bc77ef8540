import math

import numpy as np
import pytest

from medsynth import data, segmenter
from medsynth.errors import ContractError, InvalidShapeError
from medsynth.optim import TrainConfig
from medsynth.segmenter import UnetSpec
from medsynth.tensor import grad_check

from conftest import well_conditioned


def test_contract_and_size_flexibility():
    params = segmenter.init_unet(TrainConfig())
    out = segmenter.unet_forward(np.random.default_rng(0).random((1, 3, 32, 32)), params)
    assert out.shape == (1, 1, 32, 32) and np.all((out.data > 0) & (out.data < 1))
    big = segmenter.unet_forward(np.zeros((1, 3, 64, 64)), params)
    assert big.shape == (1, 1, 64, 64)


def test_divisibility_error_names_multiple():
    params = segmenter.init_unet(TrainConfig())
    with pytest.raises(InvalidShapeError, match="8"):
        segmenter.unet_forward(np.zeros((1, 3, 20, 20)), params)


def test_no_fully_connected():
    assert not segmenter.has_fully_connected(segmenter.init_unet(TrainConfig()))
    for depth in (1, 2, 3, 4):
        assert not segmenter.has_fully_connected(UnetSpec(depth=depth).layers())


def test_gradients():
    spec = UnetSpec(depth=2, base_channels=2)
    params = well_conditioned(segmenter.init_unet(TrainConfig(image_size=16), spec))
    rng = np.random.default_rng(2)
    x = rng.random((2, 3, 16, 16))
    y = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)
    assert grad_check(lambda: segmenter.seg_loss(segmenter.unet_forward(x, params), y),
                      [p for _, p in params]).passed


class TestLoss:
    def test_exact_prediction(self):
        t = np.array([[[[1.0, 0.0]]]])
        assert segmenter.seg_loss(t, t).item() == pytest.approx(1e-7, rel=1e-3)

    def test_half(self):
        t = np.array([[[[1.0, 0.0, 1.0]]]])
        assert segmenter.seg_loss(np.full_like(t, 0.5), t).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        v = segmenter.seg_loss(np.array([[[[0.9, 0.2]]]]), np.array([[[[1.0, 0.0]]]])).item()
        assert v == pytest.approx(0.1642520, abs=1e-6)

    def test_non_binary_target(self):
        with pytest.raises(ContractError):
            segmenter.seg_loss(np.full((1, 1, 2, 2), 0.5), np.full((1, 1, 2, 2), 0.5))


def toy_pairs(n=16):
    return data.gen_toy_dataset(data.ToyGenConfig(count=n, seed=3))


def test_training_reduces_loss_and_is_deterministic():
    cfg = TrainConfig(epochs=4, batch_size=8, lr=2e-3, beta1=0.9, seed=1)
    p1, h1 = segmenter.train_unet(toy_pairs(), cfg)
    p2, h2 = segmenter.train_unet(toy_pairs(), cfg)
    assert h1["loss"][-1] < h1["loss"][0]
    assert h1 == h2


def test_zero_epochs_leave_params():
    cfg = TrainConfig(epochs=0, batch_size=8)
    fresh = segmenter.init_unet(cfg)
    params, hist = segmenter.train_unet(toy_pairs(), cfg)
    assert hist == {"loss": []}
    assert all(params[k].data.tobytes() == fresh[k].data.tobytes() for k in fresh.params)


def test_segment_thresholds():
    params = segmenter.init_unet(TrainConfig())
    photo = np.random.default_rng(0).random((3, 32, 32))
    assert segmenter.segment(photo, params, threshold=0.0).all()
    assert not segmenter.segment(photo, params, threshold=1.0).any()


def test_train_unet_rejects_empty():
    with pytest.raises(ContractError):
        segmenter.train_unet([], TrainConfig())
