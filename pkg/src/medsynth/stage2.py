"""Stage-II: conditional mask-to-photo translation.

The generator is an encoder-decoder with skip concatenations between matching
depths; noise enters through dropout in the first decoder block, which stays
active at inference unless disabled. The discriminator sees photo and mask
stacked channel-wise and emits one probability per image.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .data import PairedSample
from .errors import ConfigError, ContractError, InvalidShapeError
from .nn import ParameterStore
from .optim import TrainConfig, train_adversarial
from .rng import derive_seed, make_rng
from .stage1 import clamp_prob, d1_layers
from .tensor import Tensor


def g2_layers(image_size: int = 32, base_channels: int = 16, depth: int = 3,
              dropout_rate: float = 0.5, in_channels: int = 1, out_channels: int = 3) -> list[nn.LayerSpec]:
    if image_size % 2 ** depth or depth < 1:
        raise ConfigError(f"image_size {image_size} is not divisible by 2**{depth}")
    layers, ch_in = [], in_channels
    widths = [base_channels * 2 ** min(i, 3) for i in range(depth)]
    for i, w in enumerate(widths):
        layers += [nn.conv(f"enc{i}", ch_in, w), nn.bn(f"enc{i}_bn", w),
                   nn.act(f"enc{i}_act", "leaky_relu", 0.2)]
        ch_in = w
    for i in reversed(range(1, depth)):
        w = widths[i - 1]
        layers += [nn.conv_t(f"dec{i}", ch_in, w), nn.bn(f"dec{i}_bn", w), nn.act(f"dec{i}_act", "relu")]
        if i == depth - 1 and dropout_rate > 0:
            layers.append(nn.dropout(f"dec{i}_drop", dropout_rate))
        layers.append(nn.skip(f"dec{i}_skip", f"enc{i - 1}_act", 2 * w))
        ch_in = 2 * w
    layers += [nn.conv_t("out", ch_in, out_channels), nn.act("out_act", "tanh01")]
    return layers


def init_g2(cfg: TrainConfig, base_channels: int = 16, depth: int = 3, dropout_rate: float = 0.5,
            seed: int | None = None) -> ParameterStore:
    seed = derive_seed(cfg.seed, "g2") if seed is None else seed
    meta = {"image_size": cfg.image_size, "depth": depth, "dropout_rate": dropout_rate}
    layers = g2_layers(cfg.image_size, base_channels, depth, dropout_rate)
    return nn.init_params(layers, seed, "stage2-generator", 1, meta=meta)


def init_d2(cfg: TrainConfig, base_channels: int = 16, seed: int | None = None) -> ParameterStore:
    seed = derive_seed(cfg.seed, "d2") if seed is None else seed
    meta = {"image_size": cfg.image_size}
    return nn.init_params(d1_layers(cfg.image_size, base_channels, in_channels=4), seed,
                          "stage2-discriminator", 4, meta=meta)


def _check_mask(mask: Tensor, size: int) -> None:
    if mask.ndim != 4 or mask.shape[1:] != (1, size, size):
        raise InvalidShapeError(f"mask must be (B, 1, {size}, {size}), got {mask.shape}")


def g2_forward(mask, params: ParameterStore, rng: np.random.Generator | None = None,
               train: bool = True) -> Tensor:
    """(B, 1, H, W) condition to (B, 3, H, W) photo in [0, 1].

    ``rng`` drives the dropout noise; pass ``None`` for a deterministic map.
    """
    mask = T.as_tensor(mask)
    _check_mask(mask, params.meta["image_size"])
    return nn.run(params, mask, train=train, rng=rng)


def d2_forward(photo, mask, params: ParameterStore, train: bool = True) -> Tensor:
    photo, mask = T.as_tensor(photo), T.as_tensor(mask)
    size = params.meta["image_size"]
    _check_mask(mask, size)
    if photo.ndim != 4 or photo.shape[1:] != (3, size, size) or photo.shape[0] != mask.shape[0]:
        raise InvalidShapeError(f"photo {photo.shape} does not match mask {mask.shape}")
    out = nn.run(params, T.concat([photo, mask], axis=1), train=train)
    return T.reshape(out, (photo.shape[0],))


def cgan_d_loss(d_real_pair, d_fake_pair) -> Tensor:
    d_real_pair, d_fake_pair = T.as_tensor(d_real_pair), T.as_tensor(d_fake_pair)
    if d_real_pair.shape != d_fake_pair.shape:
        raise ContractError("real and fake discriminator outputs differ in length")
    return -T.reduce_mean(T.log(clamp_prob(d_real_pair)) + T.log(1.0 - clamp_prob(d_fake_pair)))


def cgan_g_loss(d_fake_pair, fake, real, lambda_l1: float) -> Tensor:
    if lambda_l1 < 0:
        raise ConfigError(f"lambda_l1 must be >= 0, got {lambda_l1}")
    adv = -T.reduce_mean(T.log(clamp_prob(d_fake_pair)))
    if lambda_l1 == 0:
        return adv
    fake, real = T.as_tensor(fake), T.as_tensor(real)
    if fake.shape != real.shape:
        raise ContractError(f"fake {fake.shape} and real {real.shape} differ in shape")
    return adv + lambda_l1 * T.reduce_mean(T.absolute(fake - real))


def cgan_losses(d_real_pair, d_fake_pair, fake, real, lambda_l1: float) -> dict:
    """Both conditional objectives; the generator's adds an L1 reconstruction term."""
    if lambda_l1 < 0:
        raise ConfigError(f"lambda_l1 must be >= 0, got {lambda_l1}")
    return {"d_loss": cgan_d_loss(d_real_pair, d_fake_pair),
            "g_loss": cgan_g_loss(d_fake_pair, fake, real, lambda_l1)}


def train_stage2(masks: np.ndarray, photos: np.ndarray, cfg: TrainConfig, base_channels: int = 16,
                 dropout_rate: float = 0.5, on_epoch=None, depth: int = 3):
    masks = np.asarray(masks, dtype=np.float64)
    photos = np.asarray(photos, dtype=np.float64)
    if len(masks) != len(photos):
        raise ContractError("masks and photos must pair one-to-one")
    g_params = init_g2(cfg, base_channels, depth, dropout_rate)
    d_params = init_d2(cfg, base_channels)

    def d_step(batch, rng):
        m, real = batch
        with T.no_grad():
            fake = g2_forward(m, g_params, rng=rng)
        return cgan_d_loss(d2_forward(real, m, d_params), d2_forward(fake.data, m, d_params))

    def g_step(batch, rng):
        m, real = batch
        fake = g2_forward(m, g_params, rng=rng)
        return cgan_g_loss(d2_forward(fake, m, d_params), fake, real, cfg.lambda_l1)

    history = train_adversarial(g_params, d_params, d_step, g_step, (masks, photos), cfg, on_epoch)
    return g_params, d_params, history


def translate(masks: np.ndarray, g_params: ParameterStore, seed: int, stochastic: bool = True,
              chunk: int = 64) -> np.ndarray:
    """Photos for an (N, 1, H, W) mask array, evaluated with running batch-norm statistics."""
    masks = np.asarray(masks, dtype=np.float64)
    size = g_params.meta["image_size"]
    if len(masks) == 0:
        return np.zeros((0, 3, size, size))
    rng = make_rng(seed, "translate") if stochastic else None
    out = []
    with T.no_grad():
        for start in range(0, len(masks), chunk):
            out.append(g2_forward(masks[start:start + chunk], g_params, rng=rng, train=False).data)
    return np.concatenate(out)


def translate_dataset(masks, g2_params: ParameterStore, seed: int, stochastic: bool = True,
                      id_prefix: str = "syn") -> list[PairedSample]:
    """One synthetic photo per mask, with fresh ids."""
    masks = list(masks)
    if not masks:
        return []
    photos = translate(np.stack(masks), g2_params, seed, stochastic)
    return [PairedSample(np.asarray(m), p, f"{id_prefix}-{i:05d}") for i, (m, p) in enumerate(zip(masks, photos))]
