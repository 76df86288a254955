"""Encoder-decoder segmentation network with hand-derived gradients.

Architecture for ``depth = d``, ``base_channels = c``, ``in = 2k+1``; every
block is BatchNorm -> 3x3 conv -> PReLU::

    enc{l}.0   in_l -> c*2^l           (in_0 = 2k+1, in_l = c*2^(l-1))
    enc{l}.1   c*2^l -> c*2^l          -> skip l, then 2x2 max-pool
    mid.0      c*2^(d-1) -> c*2^d
    mid.1      c*2^d -> c*2^d
    dec{l}.up  c*2^(l+1) -> c*2^l      after nearest-neighbor x2 upsample
    dec{l}.0   2*c*2^l -> c*2^l        input is concat(skip l, up)
    dec{l}.1   c*2^l -> c*2^l
    head       1x1 conv c -> 2

A block ``cin -> cout`` has ``2*cin + 9*cin*cout + 2*cout`` learnable values
(norm scale/shift, kernel, bias, slopes); the head has ``2c + 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import ConfigError, ShapeMismatchError
from .params import ModelParams, add_block, block_backward, block_forward, block_param_count, ordered_grads
from .rng import STREAM_GENERATOR_INIT, make_rng

NUM_CLASSES = 2


@dataclass(frozen=True)
class GeneratorConfig:
    k: int = 1
    depth: int = 3
    base_channels: int = 8
    num_classes: int = NUM_CLASSES
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("only binary segmentation (num_classes = 2) is supported")
        h, w = self.input_size
        step = 2 ** self.depth
        if h % step or w % step:
            raise ConfigError(f"input_size {h}x{w} must be divisible by 2^depth = {step}")

    @property
    def in_channels(self) -> int:
        return 2 * self.k + 1


def _layout(cfg: GeneratorConfig) -> list[tuple[str, int, int]]:
    c, d = cfg.base_channels, cfg.depth
    blocks = []
    cin = cfg.in_channels
    for level in range(d):
        width = c * 2 ** level
        blocks += [(f"enc{level}.0", cin, width), (f"enc{level}.1", width, width)]
        cin = width
    blocks += [("mid.0", cin, c * 2 ** d), ("mid.1", c * 2 ** d, c * 2 ** d)]
    for level in reversed(range(d)):
        width = c * 2 ** level
        blocks += [
            (f"dec{level}.up", 2 * width, width),
            (f"dec{level}.0", 2 * width, width),
            (f"dec{level}.1", width, width),
        ]
    return blocks


def parameter_count(cfg: GeneratorConfig) -> int:
    """Closed-form learnable-parameter count of the layout above."""
    n = sum(block_param_count(cin, cout) for _, cin, cout in _layout(cfg))
    return n + cfg.base_channels * cfg.num_classes + cfg.num_classes


def init_generator(cfg: GeneratorConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = make_rng(seed, STREAM_GENERATOR_INIT)
    p = ModelParams("generator", cfg)
    for name, cin, cout in _layout(cfg):
        add_block(p, name, cin, cout, rng, dtype)
    c = cfg.base_channels
    p.params["head.w"] = rng.normal((cfg.num_classes, c, 1, 1), scale=np.sqrt(2.0 / c)).astype(dtype)
    p.params["head.b"] = np.zeros(cfg.num_classes, dtype=dtype)
    return p


@dataclass
class ForwardTrace:
    train: bool
    caches: dict
    skip_channels: list[int]


def generator_forward(p: ModelParams, x, mode: str = "train", update_stats: bool = True):
    """Logits of shape (B, 2, H, W) for a batch of slice groups (B, 2k+1, H, W).

    ``mode="train"`` normalizes with batch statistics and (unless
    ``update_stats`` is False) updates the running buffers; ``mode="infer"``
    uses the running buffers and never modifies them.
    """
    cfg: GeneratorConfig = p.config
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != tuple(cfg.input_size):
        raise ShapeMismatchError(
            f"generator expects (B, {cfg.in_channels}, {cfg.input_size[0]}, {cfg.input_size[1]}), got {x.shape}"
        )
    train = mode == "train"
    upd = train and update_stats
    # internal layout is (C, B, H, W)
    h = x.astype(p.dtype, copy=False).transpose(1, 0, 2, 3)
    caches = {}
    skips, skip_channels = [], []
    for level in range(cfg.depth):
        for j in range(2):
            name = f"enc{level}.{j}"
            h, caches[name] = block_forward(p, name, h, train, update_stats=upd)
        skips.append(h)
        skip_channels.append(h.shape[0])
        h, caches[f"pool{level}"] = layers.maxpool2_forward(h)
    for name in ("mid.0", "mid.1"):
        h, caches[name] = block_forward(p, name, h, train, update_stats=upd)
    for level in reversed(range(cfg.depth)):
        h, caches[f"upsample{level}"] = layers.upsample2_forward(h)
        h, caches[f"dec{level}.up"] = block_forward(p, f"dec{level}.up", h, train, update_stats=upd)
        h = np.concatenate([skips[level], h], axis=0)
        for j in range(2):
            name = f"dec{level}.{j}"
            h, caches[name] = block_forward(p, name, h, train, update_stats=upd)
    logits, caches["head"] = layers.conv2d_forward(h, p.params["head.w"], p.params["head.b"], pad=0)
    return logits.transpose(1, 0, 2, 3), ForwardTrace(train, caches, skip_channels)


def generator_backward(p: ModelParams, trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
    """Gradient of the loss wrt every learnable tensor, given dLoss/dLogits."""
    cfg: GeneratorConfig = p.config
    c = trace.caches
    if "head" not in c or f"enc{cfg.depth - 1}.1" not in c or f"enc{cfg.depth}.0" in c:
        raise ShapeMismatchError("trace does not match the generator configuration")
    grads: dict[str, np.ndarray] = {}
    dlogits = np.asarray(dlogits, dtype=p.dtype).transpose(1, 0, 2, 3)
    d, grads["head.w"], grads["head.b"] = layers.conv2d_backward(np.ascontiguousarray(dlogits), c["head"])
    dskips = [None] * cfg.depth
    # decoder levels were run deepest-first, so walk them shallowest-first
    for level in range(cfg.depth):
        for j in (1, 0):
            name = f"dec{level}.{j}"
            d = block_backward(name, d, c[name], grads)
        ns = trace.skip_channels[level]
        dskips[level], d = d[:ns], d[ns:]
        d = block_backward(f"dec{level}.up", d, c[f"dec{level}.up"], grads)
        d = layers.upsample2_backward(d, c[f"upsample{level}"])
    for name in ("mid.1", "mid.0"):
        d = block_backward(name, d, c[name], grads)
    for level in reversed(range(cfg.depth)):
        d = layers.maxpool2_backward(d, c[f"pool{level}"])
        d = d + dskips[level]
        for j in (1, 0):
            name = f"enc{level}.{j}"
            d = block_backward(name, d, c[name], grads)
    return ordered_grads(p, grads)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-probability of the true class over all B*H*W pixels.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / N``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeMismatchError(f"labels {labels.shape} do not match logits {logits.shape}")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = one_hot(labels, logits.shape[1], np.float64)
    n = labels.size
    loss = -float((onehot * logp).sum() / n)
    grad = (np.exp(logp) - onehot) / n
    return loss, grad.astype(logits.dtype)


def one_hot(labels, num_classes: int = NUM_CLASSES, dtype=np.float32):
    """(B, H, W) integer labels -> (B, C, H, W) one-hot maps."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def predict_labels(logits) -> np.ndarray:
    """Per-pixel argmax; exact ties resolve to background (class 0)."""
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)
