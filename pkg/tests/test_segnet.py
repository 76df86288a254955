import math

import numpy as np
import pytest

from _oracles import numeric_grad, rel_error
from advseg import layers
from advseg.errors import ConfigError, ShapeMismatchError
from advseg.segnet import (
    GeneratorConfig,
    generator_backward,
    generator_forward,
    init_generator,
    parameter_count,
    predict_labels,
    softmax_cross_entropy,
)

TINY = GeneratorConfig(k=0, depth=1, base_channels=2, input_size=(8, 8))


def randomize(p, rng, scale=0.5):
    """Move every parameter off its structured init so no gradient is degenerate."""
    for name, v in p.params.items():
        if name.endswith("bn.gamma"):
            v[...] = 1.0 + scale * rng.uniform(-1, 1, v.shape)
        elif name.endswith("prelu.a"):
            v[...] = rng.uniform(0.05, 0.5, v.shape)
        else:
            v[...] += scale * rng.standard_normal(v.shape) * (0.3 if name.endswith(".w") else 1.0)
    return p


# -- primitives -----------------------------------------------------------

def test_prelu_elementwise(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    a = np.array([0.25, 0.1, 0.5])
    y, _ = layers.prelu_forward(x, a)
    for c in range(3):
        expected = np.where(x[c] >= 0, x[c], a[c] * x[c])
        np.testing.assert_array_equal(y[c], expected)


def test_softmax_rows_sum_to_one(rng):
    p = layers.softmax(rng.standard_normal((4, 2, 6, 6)) * 20, axis=1)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_matches_direct_loops(rng, stride, pad):
    x = rng.standard_normal((3, 2, 5, 6))  # (C, B, H, W)
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out, _ = layers.conv2d_forward(x, w, b, stride=stride, pad=pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = out.shape[2:]
    ref = np.zeros_like(out)
    for o in range(4):
        for bb in range(2):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[:, bb, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[o, bb, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_layer_gradients_against_finite_differences(rng):
    x = rng.standard_normal((3, 2, 4, 4))
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    w, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    a = np.array([0.2, 0.4])
    probe = rng.standard_normal((2, 2, 2, 2))

    def f():
        h, _ = layers.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), update_stats=False)
        h, _ = layers.conv2d_forward(h, w, b, stride=1, pad=1)
        h, _ = layers.prelu_forward(h, a)
        h, _ = layers.maxpool2_forward(h)
        return float((h * probe).sum())

    h1, c1 = layers.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), update_stats=False)
    h2, c2 = layers.conv2d_forward(h1, w, b, stride=1, pad=1)
    h3, c3 = layers.prelu_forward(h2, a)
    _, c4 = layers.maxpool2_forward(h3)
    d = layers.maxpool2_backward(probe, c4)
    d, da = layers.prelu_backward(d, c3)
    d, dw, db = layers.conv2d_backward(d, c2)
    dx, dgamma, dbeta = layers.batchnorm_backward(d, c1)
    for analytic, arr in ((dx, x), (dgamma, gamma), (dbeta, beta), (dw, w), (db, b), (da, a)):
        assert rel_error(analytic, numeric_grad(f, arr)).max() < 1e-5


def test_upsample_backward_is_adjoint(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    g = rng.standard_normal((2, 3, 8, 10))
    y, cache = layers.upsample2_forward(x)
    assert math.isclose(float((y * g).sum()), float((x * layers.upsample2_backward(g, cache)).sum()), rel_tol=1e-12)


# -- network --------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(depth=3, input_size=(60, 64))
    with pytest.raises(ConfigError):
        GeneratorConfig(depth=0)


def test_parameter_count_hand_derived():
    # blocks (cin, cout): (1,4) (4,4) (4,8) (8,8) (8,4) (8,4) (4,4); head 4 -> 2
    # each block: 2*cin + 9*cin*cout + 2*cout
    hand = (2 + 36 + 8) + (8 + 144 + 8) + (8 + 288 + 16) + (16 + 576 + 16) \
        + (16 + 288 + 8) + (16 + 288 + 8) + (8 + 144 + 8) + (8 + 2)
    assert hand == 1920
    cfg = GeneratorConfig(k=0, depth=1, base_channels=4, input_size=(8, 8))
    assert parameter_count(cfg) == hand
    assert init_generator(cfg, 0).count() == hand


def test_init_is_deterministic_with_prelu_default():
    cfg = GeneratorConfig(k=1, depth=2, base_channels=4, input_size=(16, 16))
    p1, p2 = init_generator(cfg, 7), init_generator(cfg, 7)
    assert p1.checksum() == p2.checksum()
    assert init_generator(cfg, 8).checksum() != p1.checksum()
    for name, v in p1.params.items():
        if name.endswith("prelu.a"):
            assert np.all(v == 0.25)
        if name.endswith("bn.gamma"):
            assert np.all(v == 1)
        if name.endswith("bn.beta"):
            assert np.all(v == 0)


def test_output_shape_and_first_layer_channels(rng):
    cfg = GeneratorConfig(k=1, depth=2, base_channels=4, input_size=(32, 32))
    p = init_generator(cfg, 0)
    logits, _ = generator_forward(p, rng.random((2, 3, 32, 32)), "train")
    assert logits.shape == (2, 2, 32, 32)
    assert p.params["enc0.0.conv.w"].shape[1] == 3
    with pytest.raises(ShapeMismatchError):
        generator_forward(p, rng.random((2, 1, 32, 32)))
    with pytest.raises(ShapeMismatchError):
        generator_forward(p, rng.random((2, 3, 16, 16)))


def test_infer_mode_is_pure(rng):
    cfg = GeneratorConfig(k=1, depth=2, base_channels=4, input_size=(16, 16))
    p = init_generator(cfg, 0)
    generator_forward(p, rng.random((3, 3, 16, 16)), "train")  # populate running stats
    before = {k: v.copy() for k, v in p.buffers.items()}
    x = rng.random((2, 3, 16, 16))
    l1, _ = generator_forward(p, x, "infer")
    l2, _ = generator_forward(p, x, "infer")
    assert np.array_equal(l1, l2)
    for k, v in p.buffers.items():
        assert v.tobytes() == before[k].tobytes()


def test_train_mode_updates_running_stats(rng):
    p = init_generator(TINY, 0)
    generator_forward(p, rng.random((2, 1, 8, 8)) + 3.0, "train")
    assert p.buffers["enc0.0.bn.running_mean"][0] > 0.3


def test_zero_head_gives_uniform_softmax_and_background(rng):
    p = init_generator(TINY, 0)
    p.params["head.w"][...] = 0
    p.params["head.b"][...] = 0
    logits, _ = generator_forward(p, rng.random((2, 1, 8, 8)), "infer")
    assert not logits.any()
    assert np.all(layers.softmax(logits) == 0.5)
    assert not predict_labels(logits).any()


def test_norm_is_applied_before_first_conv(rng):
    """A constant shift of the raw input leaves the first block's normalized input unchanged."""
    p = init_generator(TINY, 0, np.float64)
    x = rng.random((2, 1, 8, 8))
    _, t1 = generator_forward(p, x, "train", update_stats=False)
    _, t2 = generator_forward(p, x + 5.0, "train", update_stats=False)
    xhat1 = t1.caches["enc0.0"][0][0]
    xhat2 = t2.caches["enc0.0"][0][0]
    np.testing.assert_allclose(xhat1, xhat2, atol=1e-9)
    np.testing.assert_allclose(t1.caches["head"][1], t2.caches["head"][1], atol=1e-7)


def test_softmax_cross_entropy_landmarks():
    loss, _ = softmax_cross_entropy(np.zeros((1, 2, 3, 3)), np.ones((1, 3, 3), dtype=int))
    assert abs(loss - math.log(2)) < 1e-12
    # one pixel with true-class probability 0.25: logits (ln 3, 0)
    loss, _ = softmax_cross_entropy(np.array([math.log(3.0), 0.0]).reshape(1, 2, 1, 1), np.ones((1, 1, 1), dtype=int))
    assert abs(loss - (-math.log(0.25))) < 1e-12


def test_softmax_cross_entropy_gradient(rng):
    logits = rng.standard_normal((2, 2, 4, 4))
    labels = rng.integers(0, 2, (2, 4, 4))
    _, grad = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_error(grad, num).max() < 1e-5


def _loss_and_grads(p, x, y, scale=1.0):
    logits, trace = generator_forward(p, x, "train", update_stats=False)
    loss, dl = softmax_cross_entropy(logits, y)
    return scale * loss, generator_backward(p, trace, scale * dl)


def test_generator_gradients_match_finite_differences(rng):
    p = randomize(init_generator(TINY, 3, np.float64), rng)
    x = rng.random((2, 1, 8, 8))
    y = rng.integers(0, 2, (2, 8, 8))
    _, grads = _loss_and_grads(p, x, y)
    worst = {}
    for name, arr in p.params.items():
        num = numeric_grad(lambda: _loss_and_grads(p, x, y)[0], arr)
        worst[name] = rel_error(grads[name], num).max()
    assert max(worst.values()) < 1e-4, worst


def test_zero_upstream_and_linearity(rng):
    p = randomize(init_generator(TINY, 3, np.float64), rng)
    x = rng.random((2, 1, 8, 8))
    logits, trace = generator_forward(p, x, "train", update_stats=False)
    zero = generator_backward(p, trace, np.zeros_like(logits))
    assert all(not g.any() for g in zero.values())
    y = rng.integers(0, 2, (2, 8, 8))
    _, g1 = _loss_and_grads(p, x, y)
    _, g2 = _loss_and_grads(p, x, y, scale=2.0)
    for name in g1:
        np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=1e-15)


def test_jacobian_vector_product_full_network(rng):
    """Directional derivative along a random parameter direction equals the gradient inner product."""
    cfg = GeneratorConfig(k=1, depth=2, base_channels=2, input_size=(8, 8))
    p = randomize(init_generator(cfg, 1, np.float64), rng)
    x = rng.random((3, 3, 8, 8))
    y = rng.integers(0, 2, (3, 8, 8))
    _, grads = _loss_and_grads(p, x, y)
    direction = {k: rng.standard_normal(v.shape) for k, v in p.params.items()}
    analytic = sum(float((grads[k] * direction[k]).sum()) for k in grads)
    base = {k: v.copy() for k, v in p.params.items()}
    h = 1e-6
    vals = []
    for s in (1, -1):
        for k in p.params:
            p.params[k][...] = base[k] + s * h * direction[k]
        vals.append(_loss_and_grads(p, x, y)[0])
    for k in p.params:
        p.params[k][...] = base[k]
    numeric = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), 1e-8)


def test_backward_rejects_foreign_trace(rng):
    p = init_generator(TINY, 0)
    other = init_generator(GeneratorConfig(k=0, depth=2, base_channels=2, input_size=(8, 8)), 0)
    _, trace = generator_forward(other, rng.random((2, 1, 8, 8)))
    with pytest.raises(ShapeMismatchError):
        generator_backward(p, trace, np.zeros((2, 2, 8, 8)))
