"""Conditional discriminator and the adversarial loss pair.

The discriminator sees an image slice group concatenated with a two-channel
mask probability map and returns one probability per sample::

    block d{i}: Norm -> 3x3 conv (stride 2, pad 1) -> PReLU,  i = 0 .. levels-1
    channels:   (2k+1)+2 -> c -> 2c -> ... -> c*2^(levels-1)
    global average pool -> affine (C -> 1) -> sigmoid

The image-conditioned losses are, with N the number of samples::

    L_d = mean(log D(real)) + mean(log(1 - D(fake)))      maximized by D
    L_g = mean(log D(fake))                               maximized by the generator
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import ConfigError, ShapeMismatchError
from .params import ModelParams, add_block, block_backward, block_forward, ordered_grads
from .rng import STREAM_DISCRIMINATOR_INIT, make_rng
from .segnet import NUM_CLASSES, one_hot


@dataclass(frozen=True)
class DiscriminatorConfig:
    k: int = 1
    levels: int = 3
    base_channels: int = 8
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError(f"discriminator levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.k < 0:
            raise ConfigError("base_channels must be >= 1 and k >= 0")

    @property
    def in_channels(self) -> int:
        return 2 * self.k + 1 + NUM_CLASSES


def make_condition_pair(x, y):
    """Channel-concatenate image channels (first) with mask channels.

    ``y`` is either a (B, H, W) integer reference mask, which is one-hot
    encoded, or a (B, 2, H, W) probability map from the generator.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if y.ndim == 3:
        y = one_hot(y, NUM_CLASSES, x.dtype)
    if y.ndim != 4 or y.shape[1] != NUM_CLASSES:
        raise ShapeMismatchError(f"mask must be (B, H, W) labels or (B, 2, H, W) probabilities, got {y.shape}")
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeMismatchError(f"image {x.shape} and mask {y.shape} do not align")
    return np.concatenate([x, y.astype(x.dtype, copy=False)], axis=1)


def init_discriminator(cfg: DiscriminatorConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = make_rng(seed, STREAM_DISCRIMINATOR_INIT)
    p = ModelParams("discriminator", cfg)
    cin = cfg.in_channels
    for i in range(cfg.levels):
        cout = cfg.base_channels * 2 ** i
        add_block(p, f"d{i}", cin, cout, rng, dtype)
        cin = cout
    p.params["fc.w"] = rng.normal((1, cin), scale=np.sqrt(1.0 / cin)).astype(dtype)
    p.params["fc.b"] = np.zeros(1, dtype=dtype)
    return p


@dataclass
class DiscriminatorTrace:
    caches: list
    pooled: np.ndarray
    feat_shape: tuple
    prob: np.ndarray


def discriminator_forward(p: ModelParams, u, mode: str = "train", update_stats: bool = True):
    """Probabilities of shape (B,) that each conditioned input is a reference pair."""
    cfg: DiscriminatorConfig = p.config
    u = np.asarray(u)
    if u.ndim != 4 or u.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(f"discriminator expects (B, {cfg.in_channels}, H, W), got {u.shape}")
    if tuple(u.shape[2:]) != tuple(cfg.input_size):
        raise ShapeMismatchError(f"discriminator expects spatial size {cfg.input_size}, got {u.shape[2:]}")
    train = mode == "train"
    h = u.astype(p.dtype, copy=False).transpose(1, 0, 2, 3)
    caches = []
    for i in range(cfg.levels):
        h, cache = block_forward(p, f"d{i}", h, train, stride=2, update_stats=train and update_stats)
        caches.append(cache)
    pooled = h.mean(axis=(2, 3))  # (C, B)
    logit = p.params["fc.w"][0] @ pooled + p.params["fc.b"][0]
    prob = layers.sigmoid(logit)
    return prob, DiscriminatorTrace(caches, pooled, h.shape, prob)


def discriminator_backward(p: ModelParams, trace: DiscriminatorTrace, dprob):
    """Returns ``(param_grads, du)`` for an upstream gradient wrt the probabilities."""
    cfg: DiscriminatorConfig = p.config
    if len(trace.caches) != cfg.levels:
        raise ShapeMismatchError("trace does not match the discriminator configuration")
    dprob = np.asarray(dprob, dtype=np.float64)
    dlogit = (dprob * trace.prob * (1.0 - trace.prob)).astype(p.dtype)
    grads = {
        "fc.w": (trace.pooled @ dlogit)[None, :],
        "fc.b": np.array([dlogit.sum()], dtype=p.dtype),
    }
    C, B, H, W = trace.feat_shape
    dpooled = p.params["fc.w"][0][:, None] * dlogit[None, :]
    d = np.broadcast_to((dpooled / (H * W))[:, :, None, None], trace.feat_shape).astype(p.dtype)
    for i in reversed(range(cfg.levels)):
        d = block_backward(f"d{i}", d, trace.caches[i], grads)
    return ordered_grads(p, grads), d.transpose(1, 0, 2, 3)


def discriminator_loss(d_real, d_fake):
    """``mean(log d_real) + mean(log(1 - d_fake))`` and its gradients.

    The discriminator maximizes this value; training minimizes its negation.
    Returns ``(loss, grad_real, grad_fake)``.
    """
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    n_r, n_f = d_real.size, d_fake.size
    loss = math.fsum(np.log(d_real)) / n_r + math.fsum(np.log1p(-d_fake)) / n_f
    return loss, 1.0 / (n_r * d_real), -1.0 / (n_f * (1.0 - d_fake))


def generator_adversarial_loss(d_fake):
    """``mean(log d_fake)`` and its gradient; the generator maximizes it."""
    d_fake = np.asarray(d_fake, dtype=np.float64)
    n = d_fake.size
    return math.fsum(np.log(d_fake)) / n, 1.0 / (n * d_fake)
