import math

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from residual_toss.tensornet import (
    Conv2d,
    MaxPool2x2,
    Param,
    ReLU,
    Sigmoid,
    UpsampleBilinear2x,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    huber_loss,
    load_tensors,
    save_tensors,
    sgd_momentum_step,
)

RNG = np.random.default_rng(1234)


def reference_conv(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, ho, wo, co))
    for a in range(n):
        for y in range(ho):
            for z in range(wo):
                for o in range(co):
                    s = b[o]
                    for ky in range(kh):
                        for kx in range(kw):
                            for ci in range(c):
                                s += xp[a, y * stride + ky, z * stride + kx, ci] * w[ky, kx, ci, o]
                    out[a, y, z, o] = s
    return out


def test_identity_kernel():
    x = RNG.standard_normal((2, 5, 6, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    out, _ = conv2d_forward(x, w, np.zeros(3), padding="same")
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("cin", [2, 7])  # thin inputs take the gathered single-GEMM path
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loops(cin, stride):
    x = RNG.standard_normal((2, 7, 6, cin))
    w = RNG.standard_normal((3, 3, cin, 4))
    b = RNG.standard_normal(4)
    out, _ = conv2d_forward(x, w, b, stride=stride, padding="same")
    ref = reference_conv(x, w, b, stride, 1)
    assert np.abs(out - ref).max() < 1e-10


def test_conv_valid_padding_and_errors():
    x = RNG.standard_normal((1, 6, 6, 2))
    w = RNG.standard_normal((3, 3, 2, 1))
    out, _ = conv2d_forward(x, w, np.zeros(1), padding=0)
    np.testing.assert_allclose(out, reference_conv(x, w, np.zeros(1), 1, 0), atol=1e-12)
    with pytest.raises(ValueError):
        conv2d_forward(x, RNG.standard_normal((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        conv2d_forward(x, w, np.zeros(2))


@pytest.mark.parametrize("cin,stride", [(3, 1), (5, 1), (3, 2)])
def test_conv_backward_finite_differences(cin, stride):
    # 2 x 3 x 5 x 5 (batch, channels, height, width) case, channels-last here
    x = RNG.standard_normal((2, 5, 5, cin))
    w = RNG.standard_normal((3, 3, cin, 4))
    b = RNG.standard_normal(4)
    out, cache = conv2d_forward(x, w, b, stride=stride)
    r = RNG.standard_normal(out.shape)
    gx, gw, gb = conv2d_backward(r, cache)

    def f():
        return float((conv2d_forward(x, w, b, stride=stride)[0] * r).sum())

    assert rel_error(gx, numeric_grad(f, x)) < 1e-6
    assert rel_error(gw, numeric_grad(f, w)) < 1e-6
    assert rel_error(gb, numeric_grad(f, b)) < 1e-6


def test_conv_skip_input_grad():
    x = RNG.standard_normal((1, 4, 4, 2))
    w = RNG.standard_normal((3, 3, 2, 3))
    out, cache = conv2d_forward(x, w, np.zeros(3))
    full = conv2d_backward(np.ones_like(out), cache)
    gx, gw, gb = conv2d_backward(np.ones_like(out), cache, need_input_grad=False)
    assert gx is None
    np.testing.assert_array_equal(gw, full[1])
    with pytest.raises(ValueError):
        conv2d_backward(np.ones((1, 3, 3, 3)), cache)


def layer_check(layer, x):
    y = layer.forward(x)
    r = RNG.standard_normal(y.shape)
    gx = layer.backward(r)

    def f():
        return float((layer.forward(x) * r).sum())

    return rel_error(gx, numeric_grad(f, x))


def test_relu_values_and_gradient():
    relu = ReLU()
    np.testing.assert_array_equal(relu.forward(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert layer_check(ReLU(), RNG.standard_normal((2, 4, 4, 3))) < 1e-5


def test_sigmoid_gradient_and_stability():
    assert layer_check(Sigmoid(), RNG.standard_normal((2, 3, 3, 2))) < 1e-5
    out = Sigmoid().forward(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))


def test_maxpool_gradient_and_shapes():
    assert layer_check(MaxPool2x2(), RNG.standard_normal((2, 6, 8, 3))) < 1e-5
    odd = MaxPool2x2().forward(RNG.standard_normal((1, 5, 7, 1)))
    assert odd.shape == (1, 2, 3, 1)
    assert layer_check(MaxPool2x2(), RNG.standard_normal((1, 5, 7, 2))) < 1e-5


def test_maxpool_constant_and_tie_break():
    pool = MaxPool2x2()
    x = np.full((1, 4, 4, 1), 3.0)
    np.testing.assert_array_equal(pool.forward(x), np.full((1, 2, 2, 1), 3.0))
    g = pool.backward(np.ones((1, 2, 2, 1)))
    expected = np.zeros((1, 4, 4, 1))
    expected[0, ::2, ::2, 0] = 1.0  # first maximum of each window in row-major order
    np.testing.assert_array_equal(g, expected)


def test_upsample_constant_and_gradient():
    up = UpsampleBilinear2x()
    np.testing.assert_array_equal(up.forward(np.full((1, 1, 1, 1), 2.5)), np.full((1, 2, 2, 1), 2.5))
    assert layer_check(UpsampleBilinear2x(), RNG.standard_normal((2, 3, 4, 2))) < 1e-5


def test_upsample_align_corners_false():
    up = UpsampleBilinear2x()
    x = np.arange(3.0).reshape(1, 1, 3, 1)
    out = up.forward(x)[0, 0, :, 0]
    # output j samples source (j + 0.5) / 2 - 0.5, clamped to the edge
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.25, 1.75, 2.0])


def test_conv_layer_accumulates_grads():
    conv = Conv2d(2, 3, rng=np.random.default_rng(0), dtype=np.float64)
    x = RNG.standard_normal((1, 4, 4, 2))
    y = conv.forward(x)
    conv.backward(np.ones_like(y))
    once = conv.weight.grad.copy()
    conv.forward(x)
    conv.backward(np.ones_like(y))
    np.testing.assert_allclose(conv.weight.grad, 2 * once)
    conv.zero_grad()
    assert not conv.weight.grad.any()


def test_bce_values():
    for y in (0, 1):
        assert bce_loss(0.5, y)[0] == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss(1.0, 1)[0] == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(0.0, 0)[0] == pytest.approx(0.0, abs=1e-6)
    assert math.isfinite(bce_loss(0.0, 1)[0])


def test_bce_gradient():
    h = 1e-6
    numeric = (bce_loss(0.3 + h, 1)[0] - bce_loss(0.3 - h, 1)[0]) / (2 * h)
    assert abs(bce_loss(0.3, 1)[1] - numeric) / abs(numeric) < 1e-8


def test_huber_values():
    assert huber_loss(0.5, 0.0)[0] == 0.125
    assert huber_loss(2.0, 0.0)[0] == 1.5
    assert huber_loss(1.0, 0.0)[0] == 0.5 == 0.5 * 1.0**2 == abs(1.0) - 0.5
    assert huber_loss(-3.0, 0.0) == (2.5, -1.0)
    assert huber_loss(0.3, 0.1)[1] == pytest.approx(0.2)


def test_sgd_plain_step():
    p = Param(np.array([1.0, -2.0]))
    p.grad[:] = [0.5, 0.5]
    sgd_momentum_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.value, [0.95, -2.05])


def test_sgd_pure_decay():
    p = Param(np.array([2.0]))
    sgd_momentum_step([p], lr=0.1, momentum=0.9, weight_decay=2**-5)
    assert p.value[0] == pytest.approx(2.0 * (1 - 0.1 * 2**-5))


def test_sgd_two_steps_match_recurrence():
    lr, mu, wd = 0.1, 0.9, 2**-5
    p = Param(np.array([1.0]))
    g1, g2 = 0.3, -0.2
    p.grad[:] = g1
    sgd_momentum_step([p], lr, mu, wd)
    p.grad[:] = g2
    sgd_momentum_step([p], lr, mu, wd)
    m1 = g1 + wd * 1.0
    x1 = 1.0 - lr * m1
    m2 = mu * m1 + g2 + wd * x1
    x2 = x1 - lr * m2
    assert p.value[0] == x2
    assert p.velocity[0] == m2


def test_sgd_shape_mismatch():
    p = Param(np.zeros(3))
    p.grad = np.zeros(2)
    with pytest.raises(ValueError):
        sgd_momentum_step([p], 0.1, 0.9, 0.0)


def test_forward_batch_order_independent():
    conv = Conv2d(3, 4, rng=np.random.default_rng(1), dtype=np.float64)
    x = RNG.standard_normal((3, 6, 6, 3))
    out = conv.forward(x)
    out_rev = conv.forward(x[::-1].copy())
    np.testing.assert_allclose(out_rev[::-1], out, atol=1e-12)
    np.testing.assert_array_equal(conv.forward(x), out)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": RNG.standard_normal((2, 3)).astype(np.float32), "b.1": RNG.standard_normal(4)}
    path = tmp_path / "w.rtnw"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == ["a", "b.1"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(back[k], tensors[k])
    raw = path.read_bytes()
    assert raw[:4] == b"RTNW"
    bad = tmp_path / "bad.rtnw"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_tensors(bad)
