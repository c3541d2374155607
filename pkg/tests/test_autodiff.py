import numpy as np
import pytest

from pconv.autodiff import (
    SGD,
    Conv2DLayer,
    NormalizedPConvLayer,
    PConvLayer,
    euclidean_loss,
    grad_check,
    max_relative_error,
    numeric_gradient,
    sum_backward,
    sum_forward,
)
from pconv.filterbank import Kernel, build_frame, dense_oracle, gaussian_kernel

from conftest import brute_force_pixels, features_at_lattice_points, random_remainder0_points


def pconv_instance(seed, n=50, d=3, s=1, c=2):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0, 3, size=(n, d))
    frame = build_frame(f, f, d, s)
    kernel = Kernel(d, s, rng.normal(size=(c, c, len(frame.offset_table))))
    return rng, PConvLayer(frame, kernel)


# ---------------------------------------------------------------- PConv


def test_pconv_forward_examples():
    rng = np.random.default_rng(0)
    pts = random_remainder0_points(rng, 3, 30)
    f = features_at_lattice_points(pts)
    frame = build_frame(f, f, 3, 2)
    x = rng.normal(size=(30, 2))
    np.testing.assert_allclose(PConvLayer(frame, Kernel.delta(3, 2, 2)).forward(x), x, atol=1e-12)
    zero = Kernel(3, 2, np.zeros((2, 2, 65)))
    np.testing.assert_array_equal(PConvLayer(frame, zero).forward(x), 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_pconv_forward_matches_oracle(seed):
    rng, layer = pconv_instance(seed, n=40)
    x = rng.normal(size=(40, 2))
    expected = (dense_oracle(layer.frame, layer.kernel) @ x.reshape(-1)).reshape(40, 2)
    np.testing.assert_allclose(layer.forward(x), expected, atol=1e-10)


def test_pconv_backward_zero_and_order():
    rng, layer = pconv_instance(1)
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((50, 2)))
    layer.forward(rng.normal(size=(50, 2)))
    gi, gk = layer.backward(np.zeros((50, 2)))
    assert not gi.any() and not gk.any()


def test_pconv_single_point_kernel_gradient():
    # s=0: one weight; out = w * sum_j b_j^2 v, so dL/dw = g * sum_j b_j * (b_j v)
    f = np.array([[0.3, 1.7]])
    frame = build_frame(f, f, 2, 0)
    layer = PConvLayer(frame, Kernel(2, 0, np.array([[[1.5]]])))
    v, g = 0.8, -1.3
    layer.forward([[v]])
    b = frame.splat_weight[0]
    cached = b * v
    gi, gk = layer.backward([[g]])
    assert gk[0, 0, 0] == pytest.approx(g * np.sum(b * cached), abs=1e-14)
    assert gi[0, 0] == pytest.approx(1.5 * g * np.sum(b * b), abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_pconv_grad_check(seed):
    rng, layer = pconv_instance(seed)
    err = grad_check(layer, rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), 1e-5)
    assert err < 1e-6


def test_pconv_grad_check_distinct_output_set():
    rng = np.random.default_rng(5)
    frame = build_frame(rng.uniform(0, 3, (40, 2)), rng.uniform(0, 3, (25, 2)), 2, 2)
    layer = PConvLayer(frame, Kernel(2, 2, rng.normal(size=(3, 2, len(frame.offset_table)))))
    assert grad_check(layer, rng.normal(size=(40, 2)), rng.normal(size=(25, 3))) < 1e-6


def test_normalized_pconv_grad_check():
    rng = np.random.default_rng(2)
    f = rng.uniform(0, 3, size=(50, 3))
    frame = build_frame(f, f, 3, 1)
    kernel = gaussian_kernel(3, 1, 1.0)
    kernel.weights += rng.uniform(0, 0.05, size=kernel.weights.shape)
    layer = NormalizedPConvLayer(frame, kernel)
    assert grad_check(layer, rng.normal(size=(50, 1)), rng.normal(size=(50, 1))) < 1e-6


def test_normalized_pconv_is_weighted_average():
    rng = np.random.default_rng(3)
    f = rng.uniform(0, 3, size=(60, 2))
    frame = build_frame(f, f, 2, 1)
    layer = NormalizedPConvLayer(frame, gaussian_kernel(2, 1, 1.0))
    x = rng.uniform(0.2, 0.9, size=(60, 1))
    out = layer.forward(x)
    assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12
    np.testing.assert_allclose(layer.forward(np.full((60, 1), 0.4)), 0.4, atol=1e-12)


def test_normalized_pconv_rejects_vanishing_weight():
    f = np.array([[0.0, 0.0]])
    frame = build_frame(f, np.array([[40.0, 40.0]]), 2, 1)
    layer = NormalizedPConvLayer(frame, gaussian_kernel(2, 1, 1.0))
    with pytest.raises(FloatingPointError):
        layer.forward([[1.0]])


# ---------------------------------------------------------------- Conv2D


def test_conv2d_examples():
    rng = np.random.default_rng(4)
    delta = np.zeros((2, 2, 5, 5))
    delta[0, 0, 2, 2] = delta[1, 1, 2, 2] = 1.0
    img = rng.normal(size=(7, 6, 2))
    np.testing.assert_array_equal(Conv2DLayer(delta).forward(img), img)

    ones = Conv2DLayer(np.ones((1, 1, 3, 3)))
    out = ones.forward(np.ones((6, 6, 1)))
    np.testing.assert_array_equal(out[1:-1, 1:-1, 0], 9.0)
    assert out[0, 0, 0] == 4.0


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 2, 5, 5))
    img = rng.normal(size=(8, 8, 2))
    np.testing.assert_allclose(Conv2DLayer(w).forward(img), brute_force_pixels(img, w), rtol=0, atol=1e-12)


def test_conv2d_backward():
    rng = np.random.default_rng(7)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    layer = Conv2DLayer(delta)
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((6, 6, 1)))
    layer.forward(rng.normal(size=(6, 6, 1)))
    g = rng.normal(size=(6, 6, 1))
    gi, gw = layer.backward(g)
    np.testing.assert_allclose(gi, g, atol=1e-15)
    gi, gw = layer.backward(np.zeros((6, 6, 1)))
    assert not gi.any() and not gw.any()

    layer = Conv2DLayer(rng.uniform(-0.2, 0.2, size=(2, 2, 5, 5)))
    assert grad_check(layer, rng.normal(size=(6, 6, 2)), rng.normal(size=(6, 6, 2))) < 1e-6


def test_conv2d_validation():
    with pytest.raises(ValueError):
        Conv2DLayer(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        Conv2DLayer(np.full((1, 1, 3, 3), np.nan))
    layer = Conv2DLayer(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ValueError):
        layer.forward(np.zeros((4, 4, 3)))


def test_conv2d_uniform_init_range():
    w = Conv2DLayer.init_uniform(1, 1, 5, np.random.default_rng(3)).weights
    r = 1.0 / np.sqrt(25)
    assert w.shape == (1, 1, 5, 5)
    assert np.all(np.abs(w) <= r) and np.abs(w).max() > 0.5 * r


# ---------------------------------------------------------------- adjoint tests


def test_layers_are_adjoint_in_their_input():
    rng, layer = pconv_instance(8)
    x, y = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    lhs = np.sum(layer.forward(x) * y)
    assert lhs == pytest.approx(np.sum(x * layer.backward(y)[0]), rel=1e-9)

    conv = Conv2DLayer(rng.normal(size=(3, 2, 5, 5)))
    x, y = rng.normal(size=(9, 7, 2)), rng.normal(size=(9, 7, 3))
    lhs = np.sum(conv.forward(x) * y)
    assert lhs == pytest.approx(np.sum(x * conv.backward(y)[0]), rel=1e-9)

    f = rng.uniform(0, 3, size=(50, 3))
    norm = NormalizedPConvLayer(build_frame(f, f, 3, 1), gaussian_kernel(3, 1, 1.0))
    x, y = rng.normal(size=(50, 1)), rng.normal(size=(50, 1))
    lhs = np.sum(norm.forward(x) * y)
    assert lhs == pytest.approx(np.sum(x * norm.backward(y)[0]), rel=1e-9)


# ---------------------------------------------------------------- sum and loss


def test_sum_layer():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 10, 3))
    np.testing.assert_array_equal(sum_forward(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(sum_forward(a, b), sum_forward(b, a))
    g = rng.normal(size=(10, 3))
    ga, gb = sum_backward(g)
    np.testing.assert_array_equal(ga, g)
    np.testing.assert_array_equal(gb, g)
    r = rng.uniform(1, 2, size=(10, 3))
    num = numeric_gradient(lambda: float(np.sum(r * sum_forward(a, b))), a, 1e-5)
    assert max_relative_error(sum_backward(r)[0], num) < 1e-6
    with pytest.raises(ValueError):
        sum_forward(a, b[:, :2])


def test_euclidean_loss():
    rng = np.random.default_rng(10)
    p = rng.normal(size=(12, 1))
    loss, grad = euclidean_loss(p, p)
    assert loss == 0.0 and not grad.any()
    assert euclidean_loss(p + 1.0, p)[0] == pytest.approx(0.5)
    t = rng.normal(size=(12, 2))
    q = t + rng.choice([-1.0, 1.0], size=t.shape) * rng.uniform(0.5, 1.5, size=t.shape)
    _, grad = euclidean_loss(q, t)
    num = numeric_gradient(lambda: euclidean_loss(q, t)[0], q, 1e-5)
    assert max_relative_error(grad, num) < 1e-6
    with pytest.raises(ValueError):
        euclidean_loss(p, t)


def test_grad_check_linear_layer_is_exact():
    rng = np.random.default_rng(11)

    class Dense:
        def __init__(self, w):
            self.weights = w

        def forward(self, x):
            self._x = x.copy()
            return x @ self.weights

        def backward(self, g):
            return g @ self.weights.T, self._x.T @ g

    # positive inputs and residuals keep every gradient entry away from zero,
    # so only roundoff separates the central differences from the truth
    layer = Dense(rng.uniform(0.5, 1.5, size=(3, 1)))
    x = rng.uniform(0.5, 1.5, size=(8, 3))
    target = x @ layer.weights - rng.uniform(0.5, 1.5, size=(8, 1))
    assert grad_check(layer, x, target) < 1e-9


# ---------------------------------------------------------------- SGD


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    g = np.array([0.5, 0.25])
    SGD(0.1, 0.0, 0.0).step(p, {"w": g})
    np.testing.assert_allclose(p["w"], [0.95, -2.025])


def test_sgd_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    SGD(0.1, 0.9, 0.0).step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_two_momentum_steps():
    lr, mu = 0.1, 0.9
    p0 = np.array([1.0, 3.0])
    g = np.array([0.2, -0.4])
    p = {"w": p0.copy()}
    opt = SGD(lr, mu, 0.0)
    opt.step(p, {"w": g})
    opt.step(p, {"w": g})
    # v1 = -lr g, v2 = mu v1 - lr g, p2 = p0 + v1 + v2 = p0 - lr (2 + mu) g
    np.testing.assert_allclose(p["w"], p0 - lr * (2 + mu) * g, rtol=1e-15)
    np.testing.assert_allclose(opt.velocity["w"], -lr * (1 + mu) * g, rtol=1e-15)
    assert opt.steps == 2


def test_sgd_weight_decay_and_shape_check():
    p = {"w": np.array([2.0])}
    SGD(0.5, 0.0, 0.1).step(p, {"w": np.array([0.0])})
    assert p["w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    with pytest.raises(ValueError):
        SGD().step(p, {"w": np.zeros(2)})


# ---------------------------------------------------------------- training


def tiny_sets(kind, epochs=5, seed=0):
    from pconv.experiment import Example, ExperimentConfig

    cfg = ExperimentConfig(model=kind, epochs=epochs, seed=seed, scale_spatial=2.0, scale_intensity=0.2)
    cfg.validate()
    y, x = np.mgrid[0:24, 0:24]
    images = []
    for n in range(4):
        clean = 0.5 + 0.3 * np.sin((x + 3 * n) / 4.0) * (y > 6 + n)
        images.append(np.clip(clean, 0, 1))
    from pconv.experiment import add_noise

    examples = [
        Example(f"im{n}", img, add_noise(img, cfg, "train", f"im{n}"), cfg) for n, img in enumerate(images)
    ]
    return cfg, examples[:3], examples[3:]


@pytest.mark.parametrize("kind", ["pcnn-trained", "cnn", "cnn+pcnn"])
def test_training_is_deterministic(kind):
    from pconv.experiment import train

    runs = []
    for _ in range(2):
        cfg, tr, va = tiny_sets(kind, epochs=2)
        model, _, history = train(cfg, tr, va)
        runs.append((model.params(), history))
    (p1, h1), (p2, h2) = runs
    assert h1 == h2
    for name in p1:
        assert p1[name].tobytes() == p2[name].tobytes()


def test_training_loss_decreases():
    from pconv.experiment import train

    cfg, tr, va = tiny_sets("pcnn-trained", epochs=5)
    _, _, history = train(cfg, tr, va)
    assert history[4][1] < history[0][1]
