import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipdp.layers import (
    Activation,
    Conv2D,
    CosineSimilarity,
    Dense,
    GroupNorm,
    ModelSpec,
    MulticlassHinge,
    ShapeError,
    SoftmaxCE,
    SquaredError,
    flatten_grads,
)
from lipdp.tensor import make_rng

from oracles import central_diff, fd_layer_vjp, jacobian, random_conv, random_groupnorm, rel_err, sigma_max


# -- forward examples ------------------------------------------------------


def test_relu_forward():
    out = Activation("relu").forward(None, np.array([[-1.0, 2.0]]))
    assert out.tolist() == [[0.0, 2.0]]


def test_groupnorm_constant_group_is_zero():
    gn = GroupNorm.contiguous(4, 1, 0.5)
    assert np.array_equal(gn.forward(None, np.full((1, 4), 3.0)), np.zeros((1, 4)))


def test_dense_identity():
    out = Dense(2, 2).forward(np.eye(2), np.array([[1.0, 2.0]]))
    assert out.tolist() == [[1.0, 2.0]]


def test_dense_bias_row():
    theta = np.array([[1.0], [2.0], [0.5]])
    out = Dense(2, 1, with_bias=True).forward(theta, np.array([[1.0, 1.0]]))
    assert out.tolist() == [[3.5]]


def test_conv_single_pixel_filter_is_channel_mix():
    conv = Conv2D(2, 1, 2, 2, 1, 1)
    theta = np.array([1.0, -1.0]).reshape(1, 2, 1, 1)
    x = np.arange(8.0).reshape(1, 8)
    assert conv.forward(theta, x).tolist() == [[-4.0, -4.0, -4.0, -4.0]]


def test_conv_matches_direct_loops():
    rng = make_rng(5)
    for _ in range(20):
        conv = random_conv(rng)
        theta = rng.standard_normal(conv.param_shape)
        x = rng.standard_normal((1, conv.input_size()))
        img = x.reshape(conv.c_in, conv.height, conv.width)
        ph, pw = (conv.filter_h - 1) // 2, (conv.filter_w - 1) // 2
        want = np.zeros((conv.c_out, conv.height, conv.width))
        for c in range(conv.c_out):
            for i in range(conv.height):
                for j in range(conv.width):
                    for d in range(conv.c_in):
                        for r in range(conv.filter_h):
                            for s in range(conv.filter_w):
                                ii, jj = i + r - ph, j + s - pw
                                if 0 <= ii < conv.height and 0 <= jj < conv.width:
                                    want[c, i, j] += img[d, ii, jj] * theta[c, d, r, s]
        np.testing.assert_allclose(conv.forward(theta, x)[0], want.ravel(), atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        Dense(3, 2).forward(np.zeros((3, 2)), np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        Dense(3, 2).forward(np.zeros((2, 2)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        GroupNorm(4, ((0, 1), (1, 2, 3)), 0.5)
    with pytest.raises(ValueError):
        Activation("softplus")


def test_model_reports_failing_layer_index():
    with pytest.raises(ShapeError) as info:
        ModelSpec((Dense(3, 4), Activation("relu"), Dense(5, 2)))
    assert info.value.layer_index == 2
    model = ModelSpec((Dense(3, 4), Activation("relu"), Dense(4, 2)))
    params = model.init_params(make_rng(0))
    params[2] = np.zeros((3, 2))
    with pytest.raises(ShapeError) as info:
        model.forward(params, np.zeros((1, 3)))
    assert info.value.layer_index == 2


# -- vjp against finite differences ----------------------------------------


def _away_from_kinks(x, eps=1e-3):
    return x + np.sign(x) * eps * (np.abs(x) < eps)


def _check_vjp(layer, params, x, up):
    gx, gp = layer.vjp(params, x, up)
    fx, fp = fd_layer_vjp(layer, params, x, up)
    assert rel_err(gx, fx) <= 1e-4
    if fp is not None:
        assert rel_err(gp[0], fp) <= 1e-4


def test_dense_vjp_outer_product():
    x = np.array([[1.0, -2.0]])
    up = np.array([[3.0, 0.5, 1.0]])
    _, gp = Dense(2, 3).vjp(np.zeros((2, 3)), x, up)
    np.testing.assert_array_equal(gp[0], np.outer(x[0], up[0]))


def test_relu_vjp_masks():
    x = np.array([[-1.0, 2.0, 0.5]])
    gx, _ = Activation("relu").vjp(None, x, np.array([[4.0, 5.0, 6.0]]))
    assert gx.tolist() == [[0.0, 5.0, 6.0]]


@pytest.mark.parametrize("with_bias", [False, True])
def test_dense_vjp_fd(with_bias):
    rng = make_rng(10 + with_bias)
    for _ in range(100):
        n, m = rng.integers(1, 7, size=2)
        layer = Dense(int(n), int(m), with_bias)
        params = rng.standard_normal(layer.param_shape)
        _check_vjp(layer, params, rng.standard_normal((1, n)), rng.standard_normal((1, m)))


def test_conv_vjp_fd():
    rng = make_rng(12)
    for _ in range(100):
        layer = random_conv(rng)
        params = rng.standard_normal(layer.param_shape)
        x = rng.standard_normal((1, layer.input_size()))
        _check_vjp(layer, params, x, rng.standard_normal((1, layer.output_size())))


def test_groupnorm_vjp_fd():
    rng = make_rng(13)
    done = 0
    while done < 100:
        dim = int(rng.integers(2, 9))
        layer = random_groupnorm(rng, dim)
        x = rng.standard_normal((1, dim)) * rng.uniform(0.1, 3.0)
        # stay clear of the clamp switch, where the map is not differentiable
        sig = [math.sqrt(x[0, list(g)].var() + layer.kappa) for g in layer.groups]
        if min(abs(s - layer.alpha) for s in sig) < 1e-3:
            continue
        _check_vjp(layer, None, x, rng.standard_normal((1, dim)))
        done += 1


def test_groupnorm_vjp_batch_matches_rows():
    rng = make_rng(14)
    layer = GroupNorm.contiguous(6, 2, 0.3)
    x = rng.standard_normal((5, 6))
    up = rng.standard_normal((5, 6))
    gx, _ = layer.vjp(None, x, up)
    for b in range(5):
        gb, _ = layer.vjp(None, x[b : b + 1], up[b : b + 1])
        np.testing.assert_allclose(gx[b], gb[0], rtol=1e-13)


@pytest.mark.parametrize("kind", ["relu", "tanh", "sigmoid"])
def test_activation_vjp_fd(kind):
    rng = make_rng(15)
    layer = Activation(kind)
    for _ in range(100):
        x = _away_from_kinks(rng.standard_normal((1, 5)) * 2)
        _check_vjp(layer, None, x, rng.standard_normal((1, 5)))


def _check_loss_grad(loss, out, labels):
    _, g = loss.value_and_grad(out, labels)
    fd = central_diff(lambda o: float(loss.value_and_grad(o, labels)[0].sum()), out)
    assert rel_err(g, fd) <= 1e-4


@pytest.mark.parametrize(
    "loss",
    [SoftmaxCE(1.0), SoftmaxCE(0.5), SoftmaxCE(3.0), CosineSimilarity(0.1), SquaredError()],
    ids=["ce1", "ce05", "ce3", "cosine", "squared"],
)
def test_loss_grad_fd(loss):
    rng = make_rng(16)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        out = rng.standard_normal((1, c)) + 0.5
        labels = rng.standard_normal((1, c)) if isinstance(loss, SquaredError) else rng.integers(0, c, 1)
        _check_loss_grad(loss, out, labels)


def test_hinge_grad_fd():
    rng = make_rng(17)
    loss = MulticlassHinge(1.5)
    done = 0
    while done < 100:
        c = int(rng.integers(2, 6))
        out = rng.standard_normal((1, c))
        labels = rng.integers(0, c, 1)
        y = 2 * np.eye(c)[labels] - 1
        if np.min(np.abs(0.75 - out * y)) < 1e-3:
            continue
        _check_loss_grad(loss, out, labels)
        done += 1


def test_model_grads_fd():
    rng = make_rng(18)
    model = ModelSpec(
        (Dense(4, 6, True), Activation("tanh"), GroupNorm.contiguous(6, 2, 0.2), Dense(6, 3)),
        SoftmaxCE(0.7),
    )
    params = model.init_params(rng)
    x = rng.standard_normal((1, 4))
    y = np.array([2])
    _, grads = model.per_sample_grads(params, x, y)
    for k in (0, 3):
        def f(p, k=k):
            ps = list(params)
            ps[k] = p
            return float(model.per_sample_grads(ps, x, y)[0].sum())
        assert rel_err(grads[k][0], central_diff(f, params[k])) <= 1e-4


def test_flatten_grads_layout():
    g = [np.ones((2, 3, 1)), np.zeros((2, 0)), 2 * np.ones((2, 2))]
    assert flatten_grads(g).tolist() == [[1, 1, 1, 2, 2]] * 2


# -- loss examples and Lipschitz values -------------------------------------


def test_ce_uniform_logits():
    for c in (2, 5, 10):
        loss, _ = SoftmaxCE().value_and_grad(np.zeros((1, c)), np.array([0]))
        assert loss[0] == pytest.approx(math.log(c), rel=1e-14)


def test_hinge_satisfied_margin_is_flat():
    loss, grad = MulticlassHinge(1.0).value_and_grad(np.array([[0.6, -0.7]]), np.array([0]))
    assert loss[0] == 0.0 and not grad.any()


def test_cosine_rejects_small_output():
    with pytest.raises(ValueError):
        CosineSimilarity(1.0).value_and_grad(np.array([[0.1, 0.2]]), np.array([0]))


def test_loss_lipschitz_values():
    assert SoftmaxCE(1.0).lipschitz() == pytest.approx(math.sqrt(2))
    assert SoftmaxCE(2.0).lipschitz() == pytest.approx(math.sqrt(2) / 2)
    assert MulticlassHinge(3.0).lipschitz() == 1.0
    assert CosineSimilarity(0.5).lipschitz() == 2.0
    assert SquaredError(1.0).lipschitz(2.0) == 6.0
    assert SquaredError().lipschitz() == math.inf


@pytest.mark.parametrize(
    "loss", [SoftmaxCE(0.4), SoftmaxCE(1.0), MulticlassHinge(2.0), CosineSimilarity(0.5)]
)
def test_loss_gradient_dominated(loss):
    rng = make_rng(19)
    worst = 0.0
    for _ in range(2000):
        c = int(rng.integers(2, 8))
        out = rng.standard_normal((1, c)) * rng.uniform(0.5, 20)
        if isinstance(loss, CosineSimilarity):
            out *= max(1.0, loss.min_output_norm / np.linalg.norm(out) * (1 + 1e-12))
        _, g = loss.value_and_grad(out, rng.integers(0, c, 1))
        worst = max(worst, float(np.linalg.norm(g)))
    assert worst <= loss.lipschitz() * (1 + 1e-12)


# -- layer Lipschitz values ------------------------------------------------


def test_tabulated_values():
    assert Activation("relu").input_lipschitz() == 1.0
    assert Activation("tanh").input_lipschitz() == 1.0
    assert Activation("sigmoid").input_lipschitz() == 0.5
    assert Activation("sigmoid", sharp=True).input_lipschitz() == 0.25
    assert GroupNorm.contiguous(4, 2, 0.25).input_lipschitz() == 4.0
    assert Dense(3, 2).param_lipschitz(2.0) == 2.0
    assert Dense(3, 2, with_bias=True).param_lipschitz(0.0) == 1.0
    assert Conv2D(1, 1, 4, 4, 3, 3).param_lipschitz(1.0) == 3.0


def test_dense_input_lipschitz_is_spectral_norm():
    rng = make_rng(20)
    theta = rng.standard_normal((5, 3))
    layer = Dense(4, 3, with_bias=True)
    assert layer.input_lipschitz(theta) == pytest.approx(sigma_max(theta[:4]), rel=1e-6)


def _fuzz_input_lipschitz(layer, params, dim, rng, trials, scale=1.0):
    L = layer.input_lipschitz(params, tol=1e-12, max_iter=20000)
    for _ in range(trials):
        x = rng.standard_normal((1, dim)) * scale
        x2 = x + rng.standard_normal((1, dim)) * rng.choice([1e-3, 0.1, 1.0]) * scale
        lhs = np.linalg.norm(layer.forward(params, x) - layer.forward(params, x2))
        assert lhs <= L * np.linalg.norm(x - x2) * (1 + 1e-9) + 1e-12


def test_input_lipschitz_fuzz():
    rng = make_rng(21)
    for _ in range(2500):
        r = rng.integers(4)
        if r == 0:
            layer = Dense(int(rng.integers(1, 6)), int(rng.integers(1, 6)), bool(rng.random() < 0.5))
            dim, params = layer.in_dim, rng.standard_normal(layer.param_shape)
        elif r == 1:
            layer = random_conv(rng)
            dim, params = layer.input_size(), rng.standard_normal(layer.param_shape)
        elif r == 2:
            dim = int(rng.integers(1, 9))
            layer, params = random_groupnorm(rng, dim), None
        else:
            dim = int(rng.integers(1, 6))
            layer, params = Activation(str(rng.choice(["relu", "tanh", "sigmoid"]))), None
        _fuzz_input_lipschitz(layer, params, dim, rng, 4, scale=float(rng.uniform(0.01, 3)))


def test_param_lipschitz_fuzz():
    rng = make_rng(22)
    for _ in range(2000):
        layer = (
            Dense(int(rng.integers(1, 6)), int(rng.integers(1, 6)), bool(rng.random() < 0.5))
            if rng.random() < 0.5
            else random_conv(rng)
        )
        dim = layer.input_size()
        x = rng.standard_normal((1, dim))
        X = float(np.linalg.norm(x))
        t1 = rng.standard_normal(layer.param_shape)
        t2 = t1 + rng.standard_normal(layer.param_shape) * 0.3
        lhs = np.linalg.norm(layer.forward(t1, x) - layer.forward(t2, x))
        # the parameter map is linear, so its Lipschitz value bounds the spectral norm difference
        diff = layer.weight_matrix(t1 - t2)
        assert lhs <= layer.param_lipschitz(X) * sigma_max(diff) * (1 + 1e-9) + 1e-12


def test_conv_jacobian_bounds():
    rng = make_rng(23)
    for _ in range(200):
        conv = random_conv(rng)
        theta = rng.standard_normal(conv.param_shape)
        x = rng.standard_normal((1, conv.input_size()))
        jx = jacobian(lambda v: conv.forward(theta, v.reshape(1, -1)), x)
        jt = jacobian(lambda t: conv.forward(t, x), theta)
        s = conv.shift_factor
        assert sigma_max(jx) <= s * sigma_max(conv.weight_matrix(theta)) * (1 + 1e-9)
        assert sigma_max(jt) <= s * np.linalg.norm(x) * (1 + 1e-9)


def test_groupnorm_output_norms():
    rng = make_rng(24)
    for _ in range(500):
        dim = int(rng.integers(1, 13))
        layer = random_groupnorm(rng, dim)
        x = rng.standard_normal((1, dim)) * rng.uniform(0.01, 5)
        out = layer.forward(None, x)[0]
        for g in layer.groups:
            assert np.linalg.norm(out[list(g)]) <= math.sqrt(len(g)) + 1e-12
        centered_norm = math.sqrt(sum(
            float(((x[0, list(g)] - x[0, list(g)].mean()) ** 2).sum()) for g in layer.groups
        ))
        assert np.linalg.norm(out) <= min(math.sqrt(dim), centered_norm / layer.alpha) + 1e-12
        assert np.linalg.norm(out) <= layer.output_bound(float(np.linalg.norm(x)), 0.0, dim) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.sampled_from(["relu", "tanh", "sigmoid"]), st.integers(0, 2**31))
def test_activation_output_bound(dim, kind, seed):
    rng = make_rng(seed)
    x = rng.standard_normal((1, dim)) * 3
    layer = Activation(kind)
    out = layer.forward(None, x)
    assert np.linalg.norm(out) <= layer.output_bound(float(np.linalg.norm(x)), 0.0, dim) + 1e-12


def test_init_params_range_and_determinism():
    model = ModelSpec((Dense(9, 4), Activation("relu"), Dense(4, 2, True)))
    a = model.init_params(make_rng(3))
    b = model.init_params(make_rng(3))
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert np.abs(a[0]).max() <= 1 / 3 and np.abs(a[2]).max() <= 1 / math.sqrt(5)
    assert a[1].size == 0
