"""Forward/backward primitives.

Feature maps are laid out channel-major as ``(C, B, H, W)`` so that the
im2col matrix is ``(C*kh*kw, B*Ho*Wo)`` and convolution output needs no
transpose. Networks convert from/to the public ``(B, C, H, W)`` layout at
their boundaries.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
(plus parameter gradients where the layer has parameters).
"""

from __future__ import annotations

import numpy as np

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _chan(v):
    return v[:, None, None, None]


def im2col(x, kh, kw, stride, pad):
    """(C, B, H, W) -> (C*kh*kw, B*Ho*Wo)."""
    C, B, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    if pad:
        xp = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = x
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, :, dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride]
    return cols.reshape(C * kh * kw, B * Ho * Wo), (Ho, Wo)


def col2im(dcols, x_shape, kh, kw, stride, pad, out_hw):
    C, B, H, W = x_shape
    Ho, Wo = out_hw
    dcols = dcols.reshape(C, kh, kw, B, Ho, Wo)
    dxp = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride] += dcols[:, dy, dx]
    if pad:
        return dxp[:, :, pad:pad + H, pad:pad + W]
    return dxp


def conv2d_forward(x, w, b, stride=1, pad=None):
    """Cross-correlation of (C, B, H, W) input with kernel ``w`` of shape (O, C, kh, kw).

    ``pad`` defaults to ``kh // 2`` (same-size output at stride 1).
    """
    O, C, kh, kw = w.shape
    if x.shape[0] != C:
        raise ValueError(f"conv expects {C} input channels, got {x.shape[0]}")
    if pad is None:
        pad = kh // 2
    cols, (Ho, Wo) = im2col(x, kh, kw, stride, pad)
    out = w.reshape(O, -1) @ cols
    out += b[:, None]
    return out.reshape(O, x.shape[1], Ho, Wo), (x.shape, cols, w, stride, pad, (Ho, Wo))


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, pad, out_hw = cache
    O = w.shape[0]
    d2 = dout.reshape(O, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = w.reshape(O, -1).T @ d2
    dx = col2im(dcols, x_shape, w.shape[2], w.shape[3], stride, pad, out_hw)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True, update_stats=True):
    """Per-channel normalization over (batch, H, W).

    In train mode batch statistics are used and, if ``update_stats``, the
    running buffers are updated in place with momentum ``BN_MOMENTUM``
    (running variance uses the unbiased batch estimate). In infer mode the
    running buffers are used and left untouched.
    """
    if train:
        axes = (1, 2, 3)
        m = x[0].size
        mean = x.mean(axis=axes)
        xc = x - _chan(mean)
        var = (xc * xc).mean(axis=axes)
        if update_stats:
            running_mean *= BN_MOMENTUM
            running_mean += (1.0 - BN_MOMENTUM) * mean
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_var *= BN_MOMENTUM
            running_var += (1.0 - BN_MOMENTUM) * unbiased
    else:
        mean, var = running_mean, running_var
        xc = x - _chan(mean)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = xc * _chan(inv_std)
    out = _chan(gamma) * xhat + _chan(beta)
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    axes = (1, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    if train:
        m = dout[0].size
        # dx = gamma*inv_std/m * (m*dout - sum(dout) - xhat*sum(dout*xhat))
        dx = _chan(gamma * inv_std) * (dout - _chan(dbeta / m) - xhat * _chan(dgamma / m))
    else:
        dx = dout * _chan(gamma * inv_std)
    return dx, dgamma, dbeta


def prelu_forward(x, slope):
    """x for x >= 0, slope * x otherwise; one slope per channel."""
    neg = x < 0
    mult = np.where(neg, _chan(slope), np.ones((), dtype=x.dtype))
    return x * mult, (x, neg, mult)


def prelu_backward(dout, cache):
    x, neg, mult = cache
    dslope = (dout * x * neg).sum(axis=(1, 2, 3))
    return dout * mult, dslope


def maxpool2_forward(x):
    A, B, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max-pool needs even spatial size, got {H}x{W}")
    win = x.reshape(A, B, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(A, B, H // 2, W // 2, 4)
    # ties route the gradient to the first maximal element of the window
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2_backward(dout, cache):
    (A, B, H, W), arg = cache
    dwin = np.zeros((A, B, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(A, B, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(A, B, H, W)


def upsample2_forward(x):
    A, B, H, W = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None], (A, B, H, 2, W, 2)).reshape(A, B, 2 * H, 2 * W)
    return out, x.shape


def upsample2_backward(dout, cache):
    A, B, H, W = cache
    return dout.reshape(A, B, H, 2, W, 2).sum(axis=(3, 5))


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dprob, prob, axis=1):
    """Gradient wrt logits given gradient wrt softmax output."""
    inner = (dprob * prob).sum(axis=axis, keepdims=True)
    return prob * (dprob - inner)


def sigmoid(z):
    """Logistic function evaluated in float64; output stays strictly inside (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    tiny = np.finfo(np.float64).eps
    return np.clip(out, tiny, 1.0 - tiny)
