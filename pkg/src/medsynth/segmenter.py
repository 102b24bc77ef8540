"""U-net segmenter used to judge how useful a (synthetic) paired dataset is.

Fully convolutional: a full-resolution stem, ``depth`` strided-conv
downsampling levels, mirrored transposed-conv upsampling levels with
channel-concatenated skips, and a 1x1 convolution to per-pixel
probabilities. Any input whose sides are multiples of ``2**depth`` works
with the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, InvalidShapeError
from .nn import ParameterStore
from .optim import TrainConfig, train_supervised
from .rng import derive_seed
from .stage1 import clamp_prob
from .tensor import Tensor


@dataclass(frozen=True)
class UnetSpec:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 1

    def layers(self) -> list[nn.LayerSpec]:
        if self.depth < 1:
            raise ConfigError("u-net depth must be >= 1")
        b = self.base_channels
        layers = [nn.conv("stem", self.in_channels, b, kernel=3, stride=1, padding=1),
                  nn.bn("stem_bn", b), nn.act("stem_act", "leaky_relu", 0.2)]
        widths = [b] + [b * 2 ** min(i + 1, 3) for i in range(self.depth)]
        for i in range(self.depth):
            layers += [nn.conv(f"down{i}", widths[i], widths[i + 1]), nn.bn(f"down{i}_bn", widths[i + 1]),
                       nn.act(f"down{i}_act", "leaky_relu", 0.2)]
        ch = widths[-1]
        for i in reversed(range(self.depth)):
            w = widths[i]
            src = "stem_act" if i == 0 else f"down{i - 1}_act"
            layers += [nn.conv_t(f"up{i}", ch, w), nn.bn(f"up{i}_bn", w), nn.act(f"up{i}_act", "relu"),
                       nn.skip(f"up{i}_skip", src, 2 * w)]
            ch = 2 * w
        layers += [nn.conv("head", ch, self.out_channels, kernel=1, stride=1, padding=0),
                   nn.act("prob", "sigmoid")]
        return layers


def init_unet(cfg: TrainConfig, spec: UnetSpec = UnetSpec(), seed: int | None = None) -> ParameterStore:
    seed = derive_seed(cfg.seed, "unet") if seed is None else seed
    meta = {"image_size": cfg.image_size, "depth": spec.depth, "base_channels": spec.base_channels}
    return nn.init_params(spec.layers(), seed, "unet", spec.in_channels, meta=meta)


def has_fully_connected(params_or_layers) -> bool:
    layers = params_or_layers.layers if isinstance(params_or_layers, ParameterStore) else params_or_layers
    return any(l.kind == "flatten_linear" for l in layers)


def unet_forward(photo, params: ParameterStore, train: bool = True) -> Tensor:
    """(B, 3, H, W) photo to (B, 1, H, W) foreground probabilities."""
    photo = T.as_tensor(photo)
    multiple = 2 ** params.meta["depth"]
    if photo.ndim != 4 or photo.shape[1] != 3:
        raise InvalidShapeError(f"u-net expects (B, 3, H, W), got {photo.shape}")
    if photo.shape[2] % multiple or photo.shape[3] % multiple:
        raise InvalidShapeError(
            f"u-net input sides must be multiples of {multiple}, got {photo.shape[2]}x{photo.shape[3]}")
    return nn.run(params, photo, train=train)


def seg_loss(pred, target) -> Tensor:
    """Mean per-pixel binary cross-entropy."""
    pred = T.as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ContractError(f"prediction {pred.shape} and target {t.shape} differ in shape")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("segmentation target must be binary")
    p = clamp_prob(pred)
    return -T.reduce_mean(T.log(p) * t + T.log(1.0 - p) * (1.0 - t))


def train_unet(pairs, cfg: TrainConfig, spec: UnetSpec = UnetSpec(), params: ParameterStore | None = None,
               on_epoch=None):
    """Fit the u-net to (photo, binary mask) pairs with Adam; returns (params, history)."""
    if isinstance(pairs, tuple):
        photos, masks = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ContractError("train_unet needs at least one pair")
        photos = np.stack([p.photo for p in pairs])
        masks = np.stack([p.mask for p in pairs])
    if len(photos) == 0:
        raise ContractError("train_unet needs at least one pair")
    masks = (np.asarray(masks) > 0.5).astype(np.float64)
    params = params or init_unet(cfg, spec)

    def step(batch, rng):
        x, y = batch
        return seg_loss(unet_forward(x, params), y)

    history = train_supervised(params, step, (np.asarray(photos, dtype=np.float64), masks), cfg, on_epoch)
    return params, history


def predict(photos, params: ParameterStore, chunk: int = 64) -> np.ndarray:
    photos = np.asarray(photos, dtype=np.float64)
    single = photos.ndim == 3
    if single:
        photos = photos[None]
    out = []
    with T.no_grad():
        for start in range(0, len(photos), chunk):
            out.append(unet_forward(photos[start:start + chunk], params, train=False).data)
    out = np.concatenate(out)
    return out[0] if single else out


def segment(photo, params: ParameterStore, threshold: float = 0.5) -> np.ndarray:
    """Binary mask(s): clamped probability strictly above ``threshold``."""
    p = np.clip(predict(photo, params), 1e-7, 1.0 - 1e-7)
    return (p > threshold).astype(np.float64)

