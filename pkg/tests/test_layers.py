import math

import numpy as np
import pytest
from conftest import numerical_jacobian, numerical_logdet, randomize_layer

from invflow.errors import ArgumentError, DimensionError, SingularityError, StateError
from invflow.layers import (
    LOG_2PI,
    ActNorm,
    AffineCoupling,
    Conv1x1,
    InvConv,
    QuadCoupling,
    Split,
    Squeeze,
    squeeze,
    unsqueeze,
)
from invflow.tensor import kernel_mask


def single(layer):
    return lambda x: layer.forward(x[None])[0][0]


def random_input(rng, shape):
    return rng.normal(size=(1,) + shape)


# -- actnorm ----------------------------------------------------------------


def test_actnorm_degenerate_channel():
    a = ActNorm(1)
    x = np.full((4, 1, 2, 2), 5.0)
    a.initialize(x)
    assert a.scale[0] == 1.0 and a.bias[0] == -5.0
    np.testing.assert_array_equal(a.forward(x)[0], 0.0)


def test_actnorm_already_normalized():
    a = ActNorm(1)
    a.initialize(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
    assert math.isclose(a.scale[0], 1.0) and a.bias[0] == 0.0


def test_actnorm_zero_two_four():
    a = ActNorm(2)
    x = np.stack([np.full((2, 1, 1), v) for v in (0.0, 2.0, 4.0)])
    a.initialize(x)
    assert math.isclose(1 / a.scale[0], 1.632993161855452, rel_tol=1e-12)
    y = a.forward(x)[0]
    assert abs(y.mean()) < 1e-9 and abs(y.var() - 1) < 1e-9


def test_actnorm_empty_and_uninitialized():
    with pytest.raises(ArgumentError):
        ActNorm(1).initialize(np.zeros((0, 1, 2, 2)))
    with pytest.raises(StateError):
        ActNorm(1).forward(np.zeros((1, 1, 2, 2)))


def test_actnorm_identity_and_scale_two(rng):
    a = ActNorm(1, identity=True)
    x = rng.normal(size=(2, 1, 4, 4))
    y, ld, _ = a.forward(x)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(ld, 0.0)
    a.params["logs"][0] = math.log(2.0)
    y, ld, _ = a.forward(x)
    np.testing.assert_allclose(y, 2 * x)
    assert math.isclose(ld[0], 16 * math.log(2), rel_tol=1e-12)


def test_actnorm_roundtrip(rng):
    a = randomize_layer(ActNorm(3, identity=True), rng)
    x = rng.normal(size=(2, 3, 4, 4))
    assert np.max(np.abs(a.inverse(a.forward(x)[0]) - x)) < 1e-12


# -- 1x1 ----------------------------------------------------------------------


def test_conv1x1_identity_and_scalar(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    c = Conv1x1(1, identity=True)
    y, ld, _ = c.forward(x)
    np.testing.assert_array_equal(y, x)
    assert ld[0] == 0.0
    c.params["weight"][...] = [[2.0]]
    y, ld, _ = c.forward(x)
    np.testing.assert_array_equal(y, 2 * x)
    assert math.isclose(ld[0], 16 * math.log(2), rel_tol=1e-12)


def test_conv1x1_rotation_init(rng):
    c = Conv1x1(6, rng)
    assert abs(c.forward(np.zeros((1, 6, 2, 2)))[1][0]) < 1e-9


def test_conv1x1_singular():
    c = Conv1x1(2, identity=True)
    c.params["weight"][...] = [[1.0, 2.0], [2.0, 4.0]]
    with pytest.raises(SingularityError):
        c.forward(np.zeros((1, 2, 2, 2)))
    with pytest.raises(SingularityError):
        c.inverse(np.zeros((1, 2, 2, 2)))


# -- couplings ----------------------------------------------------------------


def test_affine_zero_init_is_identity(rng):
    layer = AffineCoupling(4, 8, rng)
    x = rng.normal(size=(2, 4, 3, 3))
    y, ld, _ = layer.forward(x)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(ld, 0.0)


def test_affine_constant_scale(rng):
    layer = AffineCoupling(2, 4, rng)
    layer.params["c2.b"][...] = [0.0, math.log(2)]  # f = 0, g = ln 2
    x = rng.normal(size=(1, 2, 3, 3))
    y, ld, _ = layer.forward(x)
    np.testing.assert_allclose(y[:, 1], 2 * x[:, 1], rtol=1e-14)
    np.testing.assert_array_equal(y[:, 0], x[:, 0])
    assert math.isclose(ld[0], 9 * math.log(2), rel_tol=1e-12)


def test_affine_odd_channels(rng):
    with pytest.raises(DimensionError):
        AffineCoupling(3, 4, rng)


@pytest.mark.parametrize("permute", [False, True])
def test_affine_random_roundtrip_and_jacobian(permute, rng):
    layer = randomize_layer(AffineCoupling(2, 6, rng, permute=permute), rng)
    x = random_input(rng, (2, 2, 2))
    y, ld, _ = layer.forward(x)
    assert np.max(np.abs(layer.inverse(y) - x)) < 1e-9
    assert abs(ld[0] - numerical_logdet(single(layer), x[0])) < 1e-6


def test_quad_zero_init_and_constant(rng):
    layer = QuadCoupling(4, 6, rng)
    x = rng.normal(size=(1, 4, 3, 3))
    y, ld, _ = layer.forward(x)
    np.testing.assert_array_equal(y, x)
    assert ld[0] == 0.0
    layer.params["f2.c2.b"][...] = [0.0, math.log(3)]
    y, ld, _ = layer.forward(x)
    np.testing.assert_allclose(y[:, 3], 3 * x[:, 3], rtol=1e-14)
    np.testing.assert_array_equal(y[:, :3], x[:, :3])
    assert math.isclose(ld[0], 9 * math.log(3), rel_tol=1e-12)


def test_quad_bad_channels(rng):
    with pytest.raises(DimensionError):
        QuadCoupling(6, 4, rng)


def test_quad_random_roundtrip_and_jacobian(rng):
    layer = randomize_layer(QuadCoupling(4, 6, rng), rng)
    x = random_input(rng, (4, 2, 2))
    y, ld, _ = layer.forward(x)
    assert np.max(np.abs(layer.inverse(y) - x)) < 1e-9
    assert abs(ld[0] - numerical_logdet(single(layer), x[0])) < 1e-6


# -- squeeze / split ------------------------------------------------------------


def test_squeeze_small():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(squeeze(x).ravel(), [1, 2, 3, 4])


def test_squeeze_roundtrip_and_permutation(rng):
    x = rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(unsqueeze(squeeze(x)), x)
    v = np.arange(16.0).reshape(1, 4, 4)
    out = squeeze(squeeze(v))
    assert out.shape == (16, 1, 1)
    assert sorted(out.ravel()) == list(range(16))
    # frozen permutation table of the double squeeze
    np.testing.assert_array_equal(out.ravel(), [0, 2, 8, 10, 1, 3, 9, 11, 4, 6, 12, 14, 5, 7, 13, 15])


def test_squeeze_odd():
    with pytest.raises(DimensionError):
        squeeze(np.zeros((1, 3, 2)))


def test_split_standard_logprob(rng):
    s = Split(4)
    x = np.zeros((1, 4, 2, 2))
    _, _, logp, _ = s.forward(x)
    D = 8
    assert math.isclose(logp[0], -0.5 * D * LOG_2PI, rel_tol=1e-14)
    x[:, 2:] = rng.normal(size=(1, 2, 2, 2))
    s2 = float(np.sum(x[:, 2:] ** 2))
    _, _, logp, _ = s.forward(x)
    assert math.isclose(logp[0], -0.5 * D * LOG_2PI - 0.5 * s2, rel_tol=1e-12)


def test_split_roundtrip(rng):
    s = randomize_layer(Split(4), rng)
    x = rng.normal(size=(2, 4, 3, 3))
    kept, z, _, _ = s.forward(x)
    np.testing.assert_array_equal(s.inverse(kept, z), x)
    with pytest.raises(DimensionError):
        Split(3)


# -- jacobians and gradients for every layer --------------------------------------


def all_layers(rng):
    inv = InvConv(4, 2, rng, scale=0.3)
    return [
        ("invconv", inv, (4, 2, 2)),
        ("actnorm", randomize_layer(ActNorm(4, identity=True), rng), (4, 2, 2)),
        ("conv1x1", Conv1x1(4, rng), (4, 2, 2)),
        ("affine", randomize_layer(AffineCoupling(4, 5, rng), rng), (4, 2, 2)),
        ("affine-perm", randomize_layer(AffineCoupling(4, 5, rng, permute=True), rng), (4, 2, 2)),
        ("quad", randomize_layer(QuadCoupling(4, 5, rng), rng), (4, 2, 2)),
        ("squeeze", Squeeze(), (2, 4, 4)),
    ]


def test_every_layer_logdet_matches_numerical_jacobian(rng):
    for name, layer, shape in all_layers(rng):
        x = random_input(rng, shape)
        y, ld, _ = layer.forward(x)
        assert abs(ld[0] - numerical_logdet(single(layer), x[0])) < 1e-6, name
        assert np.max(np.abs(layer.inverse(y) - x)) < 1e-9, name


def test_invconv_logdet_identically_zero(rng):
    layer = InvConv(4, 3, rng, scale=0.5)
    _, ld, _ = layer.forward(rng.normal(size=(3, 4, 5, 5)))
    assert np.all(ld == 0.0)


def test_composition_additivity(rng):
    layers = [layer for _, layer, shape in all_layers(rng) if shape == (4, 2, 2)]
    x = random_input(rng, (4, 2, 2))
    h, total = x, 0.0
    for layer in layers:
        h, ld, _ = layer.forward(h)
        total += ld[0]

    def composed(v):
        for layer in layers:
            v = layer.forward(v[None])[0][0]
        return v

    assert abs(total - numerical_logdet(composed, x[0])) < 1e-6


def test_every_layer_backward_matches_finite_differences(rng):
    # L = <a, y> + b * logdet for random a, b
    for name, layer, shape in all_layers(rng):
        x = rng.normal(size=(2,) + shape)
        y, ld, cache = layer.forward(x)
        a = rng.normal(size=y.shape)
        b = rng.normal(size=2)

        def loss(xx):
            yy, ll, _ = layer.forward(xx)
            return float(np.sum(a * yy) + np.dot(b, ll))

        gx, grads = layer.backward(cache, a, b)
        num = numerical_jacobian(lambda v: np.array([loss(v)]), x, 1e-6).reshape(x.shape)
        np.testing.assert_allclose(gx, num, rtol=1e-5, atol=1e-6, err_msg=name)
        for pname, arr in layer.params.items():
            def loss_p(p):
                old = arr.copy()
                arr[...] = p
                try:
                    return np.array([loss(x)])
                finally:
                    arr[...] = old
            num_p = numerical_jacobian(loss_p, arr.copy(), 1e-6).reshape(arr.shape)
            if name == "invconv":
                free, _ = kernel_mask(arr.shape[0], arr.shape[-1])
                np.testing.assert_allclose(grads[pname][free], num_p[free], rtol=1e-5, atol=1e-6)
            else:
                np.testing.assert_allclose(grads[pname], num_p, rtol=1e-5, atol=1e-6,
                                           err_msg=f"{name}/{pname}")


def test_split_backward(rng):
    s = randomize_layer(Split(4), rng)
    x = rng.normal(size=(2, 4, 3, 3))
    kept, z, logp, cache = s.forward(x)
    a = rng.normal(size=kept.shape)
    b = rng.normal(size=2)

    def loss(xx):
        k, _, lp, _ = s.forward(xx)
        return np.array([np.sum(a * k) + np.dot(b, lp)])

    gx, grads = s.backward(cache, a, b)
    np.testing.assert_allclose(gx, numerical_jacobian(loss, x).reshape(x.shape), rtol=1e-5, atol=1e-6)
    for pname, arr in s.params.items():
        def loss_p(p):
            old = arr.copy()
            arr[...] = p
            try:
                return loss(x)
            finally:
                arr[...] = old
        num = numerical_jacobian(loss_p, arr.copy()).reshape(arr.shape)
        np.testing.assert_allclose(grads[pname], num, rtol=1e-5, atol=1e-6)
