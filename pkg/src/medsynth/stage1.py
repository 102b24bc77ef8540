"""Stage-I: noise to segmentation-mask GAN.

The generator projects a noise vector onto a 4x4 feature map with a
transposed convolution, then doubles the spatial size with strided
transposed convolutions until it reaches ``image_size``. The discriminator
mirrors that with strided convolutions and ends in a dense head (or a
convolutional head when ``head="conv"``).
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, InvalidShapeError
from .nn import ParameterStore
from .optim import TrainConfig, train_adversarial
from .rng import derive_seed, make_rng
from .tensor import Tensor

PROB_EPS = 1e-7


def clamp_prob(p) -> Tensor:
    return T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def _doublings(image_size: int) -> int:
    n = int(np.log2(image_size / 4)) if image_size >= 8 else 0
    if image_size < 8 or 4 * 2 ** n != image_size:
        raise ConfigError(f"image_size {image_size} is not reachable by doubling from 4")
    return n


def g1_layers(image_size: int = 32, noise_dim: int = 64, base_channels: int = 16,
              out_channels: int = 1) -> list[nn.LayerSpec]:
    ups = _doublings(image_size)
    ch = base_channels * 2 ** (ups - 1)
    layers = [nn.conv_t("proj", noise_dim, ch, kernel=4, stride=1, padding=0),
              nn.bn("proj_bn", ch), nn.act("proj_act", "leaky_relu")]
    for i in range(ups - 1):
        layers += [nn.conv_t(f"up{i}", ch, ch // 2), nn.bn(f"up{i}_bn", ch // 2),
                   nn.act(f"up{i}_act", "leaky_relu")]
        ch //= 2
    layers += [nn.conv_t("out", ch, out_channels), nn.act("out_act", "tanh01")]
    return layers


def d1_layers(image_size: int = 32, base_channels: int = 16, in_channels: int = 1,
              head: str = "linear", kernel: int = 4, first_bn: bool = True) -> list[nn.LayerSpec]:
    """Strided-conv discriminator; ``first_bn=False`` drops the batch norm after the first conv."""
    downs = _doublings(image_size)
    pad = (kernel - 1) // 2
    layers, ch_in, ch = [], in_channels, base_channels
    for i in range(downs):
        layers.append(nn.conv(f"down{i}", ch_in, ch, kernel=kernel, stride=2, padding=pad))
        if i > 0 or first_bn:
            layers.append(nn.bn(f"down{i}_bn", ch))
        layers.append(nn.act(f"down{i}_act", "leaky_relu", 0.2))
        ch_in, ch = ch, ch * 2
    if head == "linear":
        layers.append(nn.dense("head", ch_in * 16, 1))
    elif head == "conv":
        layers.append(nn.conv("head", ch_in, 1, kernel=4, stride=1, padding=0))
    else:
        raise ConfigError(f"unknown discriminator head {head!r}")
    layers.append(nn.act("prob", "sigmoid"))
    return layers


def init_g1(cfg: TrainConfig, base_channels: int = 16, seed: int | None = None,
            out_channels: int = 1) -> ParameterStore:
    seed = derive_seed(cfg.seed, "g1") if seed is None else seed
    meta = {"image_size": cfg.image_size, "noise_dim": cfg.noise_dim, "out_channels": out_channels}
    layers = g1_layers(cfg.image_size, cfg.noise_dim, base_channels, out_channels)
    return nn.init_params(layers, seed, "stage1-generator", cfg.noise_dim, meta=meta)


def init_d1(cfg: TrainConfig, base_channels: int = 16, seed: int | None = None,
            in_channels: int = 1, head: str = "linear", first_bn: bool = True) -> ParameterStore:
    seed = derive_seed(cfg.seed, "d1") if seed is None else seed
    meta = {"image_size": cfg.image_size, "in_channels": in_channels, "head": head}
    layers = d1_layers(cfg.image_size, base_channels, in_channels, head, first_bn=first_bn)
    return nn.init_params(layers, seed, "stage1-discriminator", in_channels, meta=meta)


def sample_noise(count: int, noise_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((count, noise_dim))


def g1_forward(z, params: ParameterStore, train: bool = True) -> Tensor:
    """(B, noise_dim) noise to (B, C, image_size, image_size) values in [0, 1]."""
    z = T.as_tensor(z)
    noise_dim = params.meta["noise_dim"]
    if z.ndim != 2 or z.shape[1] != noise_dim:
        raise InvalidShapeError(f"noise must have shape (B, {noise_dim}), got {z.shape}")
    return nn.run(params, T.reshape(z, (z.shape[0], noise_dim, 1, 1)), train=train)


def d1_forward(x, params: ParameterStore, train: bool = True) -> Tensor:
    """Probability that each image in the batch is real; shape (B,)."""
    x = T.as_tensor(x)
    size, ch = params.meta["image_size"], params.meta["in_channels"]
    if x.ndim != 4 or x.shape[1:] != (ch, size, size):
        raise InvalidShapeError(f"discriminator expects (B, {ch}, {size}, {size}), got {x.shape}")
    out = nn.run(params, x, train=train)
    return T.reshape(out, (x.shape[0],))


def d1_loss(d_real, d_fake) -> Tensor:
    """Discriminator cross-entropy, -mean[log D(x) + log(1 - D(G(z)))]."""
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    if d_real.shape != d_fake.shape:
        raise ContractError(f"d_real {d_real.shape} and d_fake {d_fake.shape} differ in length")
    if d_real.size == 0:
        raise ContractError("empty batch")
    terms = T.log(clamp_prob(d_real)) + T.log(1.0 - clamp_prob(d_fake))
    return -T.reduce_mean(terms)


def g1_loss(d_fake, saturating: bool = False) -> Tensor:
    """Generator loss.

    ``saturating=True`` is the minimax form mean[log(1 - D(G(z)))], which is
    non-positive and flat where the discriminator is confident. The default
    is the non-saturating -mean[log D(G(z))].
    """
    d_fake = T.as_tensor(d_fake)
    if d_fake.size == 0:
        raise ContractError("empty batch")
    if saturating:
        return T.reduce_mean(T.log(1.0 - clamp_prob(d_fake)))
    return -T.reduce_mean(T.log(clamp_prob(d_fake)))


def train_gan(images: np.ndarray, cfg: TrainConfig, g_params: ParameterStore | None = None,
              d_params: ParameterStore | None = None, saturating: bool = False,
              g_base: int = 16, d_base: int = 16, head: str = "linear", d_first_bn: bool = True,
              instance_noise: float = 0.0, on_epoch=None):
    """Train an unconditional DCGAN on ``images`` of shape (N, C, H, W) in [0, 1].

    Stage-I uses it on masks (C=1); the single-GAN baseline uses it on photos.
    ``instance_noise`` adds N(0, sigma^2) to every discriminator input, real
    and fake alike, so the discriminator cannot win on hard 0/1 pixels alone.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise InvalidShapeError(f"training images must be (N, C, {cfg.image_size}, {cfg.image_size})")
    if instance_noise < 0:
        raise ConfigError(f"instance_noise must be >= 0, got {instance_noise}")
    ch = images.shape[1]
    g_params = g_params or init_g1(cfg, g_base, out_channels=ch)
    d_params = d_params or init_d1(cfg, d_base, in_channels=ch, head=head, first_bn=d_first_bn)
    nd = cfg.noise_dim

    def noisy(x, rng):
        if instance_noise == 0:
            return x
        return x + instance_noise * rng.standard_normal(x.shape)

    def d_step(batch, rng):
        z = sample_noise(len(batch), nd, rng)
        with T.no_grad():
            fake = g1_forward(z, g_params).data
        return d1_loss(d1_forward(noisy(batch, rng), d_params), d1_forward(noisy(fake, rng), d_params))

    def g_step(batch, rng):
        z = sample_noise(len(batch), nd, rng)
        fake = g1_forward(z, g_params)
        return g1_loss(d1_forward(noisy(fake, rng), d_params), saturating=saturating)

    history = train_adversarial(g_params, d_params, d_step, g_step, images, cfg, on_epoch)
    return g_params, d_params, history


def generate(g_params: ParameterStore, count: int, seed: int, chunk: int = 64) -> np.ndarray:
    """``count`` samples as an (count, C, H, W) array from seeded noise."""
    size, ch = g_params.meta["image_size"], g_params.meta.get("out_channels", 1)
    if count <= 0:
        return np.zeros((0, ch, size, size))
    z = sample_noise(count, g_params.meta["noise_dim"], make_rng(seed, "sample"))
    out = []
    with T.no_grad():
        for start in range(0, count, chunk):
            out.append(g1_forward(z[start:start + chunk], g_params, train=False).data)
    return np.concatenate(out)


def sample_masks(g_params: ParameterStore, count: int, seed: int) -> list[np.ndarray]:
    """``count`` soft masks of shape (1, H, W); may exceed the training-set size."""
    return list(generate(g_params, count, seed))


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(mask) > threshold).astype(np.float64)
