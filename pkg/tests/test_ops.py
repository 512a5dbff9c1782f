import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_conv
from dbbrep.ops import (
    add,
    avgpool2d,
    batchnorm_infer,
    concat_channels,
    conv2d,
    conv2d_reference,
    rep_bias,
)
from dbbrep.tensor import BnParams, ContractError, ConvParams, conv_output_size
from dbbrep.transforms import avgpool_to_conv

CONVS = [conv2d, conv2d_reference]


@pytest.mark.parametrize("conv", CONVS)
def test_conv_scalar(conv):
    p = ConvParams(np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    out = conv(np.full((1, 1, 1, 1), 2.0), p)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 7.0


@pytest.mark.parametrize("conv", CONVS)
def test_conv_identity_kernel(conv, rng):
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    x = rng.normal(size=(1, 1, 3, 3))
    np.testing.assert_array_equal(conv(x, ConvParams(k, padding=1)), x)


@pytest.mark.parametrize("conv", CONVS)
def test_conv_matches_oracle_strided(conv, rng):
    x = rng.normal(size=(1, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    out = conv(x, ConvParams(k, stride=2, padding=1))
    expected = brute_conv(x, k, stride=(2, 2), padding=(1, 1))
    assert out.shape == (1, 3, 2, 2)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_conv_backends_match_oracle(backend, rng):
    x = rng.normal(size=(2, 6, 7, 5))
    k = rng.normal(size=(4, 3, 3, 1))
    b = rng.normal(size=4)
    p = ConvParams(k, b, stride=(2, 1), padding=(1, 0), groups=2)
    out = conv2d(x, p, backend=backend)
    expected = brute_conv(x, k, b, (2, 1), (1, 0), 2)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    c=st.integers(1, 8),
    d=st.integers(1, 8),
    k=st.sampled_from([1, 3, 5]),
    stride=st.sampled_from([1, 2]),
    gsel=st.sampled_from(["1", "2", "C"]),
)
def test_conv_agrees_with_reference(seed, c, d, k, stride, gsel):
    g = {"1": 1, "2": 2, "C": c}[gsel]
    if c % g or d % g:
        d = g * max(1, d // g)
        if c % g:
            g = 1
    rng = np.random.default_rng(seed)
    p = ConvParams(rng.normal(size=(d, c // g, k, k)), rng.normal(size=d),
                   stride=stride, padding=k // 2, groups=g)
    x = rng.normal(size=(1, c, 6, 5))
    ref = conv2d_reference(x, p)
    np.testing.assert_allclose(conv2d(x, p), ref, rtol=0, atol=1e-12)
    out32 = conv2d(x.astype(np.float32), p)
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, ref, rtol=1e-4, atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.floats(-10, 10))
def test_conv_homogeneity(seed, p):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 6))
    f = rng.normal(size=(4, 3, 3, 3))
    lhs = conv2d(x, ConvParams(p * f, padding=1))
    rhs = p * conv2d(x, ConvParams(f, padding=1))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, abs(p)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stride=st.sampled_from([1, 2]), g=st.sampled_from([1, 2]))
def test_conv_additivity(seed, stride, g):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 4, 7, 6))
    f1, f2 = rng.normal(size=(2, 6, 4 // g, 3, 3))
    kw = dict(stride=stride, padding=1, groups=g)
    lhs = conv2d(x, ConvParams(f1, **kw)) + conv2d(x, ConvParams(f2, **kw))
    rhs = conv2d(x, ConvParams(f1 + f2, **kw))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), g=st.sampled_from([2, 3, 6]))
def test_grouped_conv_is_split_dense_concat(seed, g):
    rng = np.random.default_rng(seed)
    c, d = 6, 12
    x = rng.normal(size=(2, c, 5, 5))
    k = rng.normal(size=(d, c // g, 3, 3))
    b = rng.normal(size=d)
    grouped = conv2d(x, ConvParams(k, b, padding=1, groups=g))
    cg, dg = c // g, d // g
    parts = [
        conv2d(x[:, i * cg:(i + 1) * cg],
               ConvParams(k[i * dg:(i + 1) * dg], b[i * dg:(i + 1) * dg], padding=1))
        for i in range(g)
    ]
    np.testing.assert_array_equal(grouped, np.concatenate(parts, axis=1))


@pytest.mark.parametrize("h,k,pad,stride", [
    (1, 1, 0, 1), (5, 3, 1, 1), (5, 3, 1, 2), (6, 3, 1, 2), (7, 5, 2, 2), (4, 5, 2, 1),
    (2, 5, 2, 2), (9, 3, 0, 3),
])
def test_output_shape_formula(h, k, pad, stride):
    x = np.zeros((1, 1, h, h))
    out = conv2d(x, ConvParams(np.zeros((1, 1, k, k)), stride=stride, padding=pad))
    expected = (h + 2 * pad - k) // stride + 1
    assert out.shape == (1, 1, expected, expected)
    assert conv_output_size(h, k, stride, pad) == expected


def test_conv_contract_errors():
    p = ConvParams(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ContractError):
        conv2d(np.zeros((1, 2, 5, 5)), p)
    with pytest.raises(ContractError):
        conv2d(np.zeros((1, 3, 2, 2)), p)
    with pytest.raises(ContractError):
        conv2d(np.zeros((3, 5, 5)), p)
    with pytest.raises(ContractError):
        ConvParams(np.zeros((3, 2, 3, 3)), groups=2)
    with pytest.raises(ContractError):
        ConvParams(np.zeros((2, 2, 3, 3)), bias=np.zeros(3))


def test_batchnorm_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(batchnorm_infer(x, BnParams.identity(3)), x)


def test_batchnorm_scalar():
    bn = BnParams([2.0], [2.0], [3.0], [1.0])
    assert batchnorm_infer(np.full((1, 1, 1, 1), 4.0), bn)[0, 0, 0, 0] == 4.0


def test_batchnorm_matches_elementwise(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    mu, sd, ga, be = rng.normal(size=3), rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3)
    out = batchnorm_infer(x, BnParams(mu, sd, ga, be))
    expected = np.empty_like(x)
    for j in range(3):
        expected[:, j] = (x[:, j] - mu[j]) * ga[j] / sd[j] + be[j]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
    with pytest.raises(ContractError):
        batchnorm_infer(x, BnParams.identity(2))


def test_bn_epsilon_folded_into_std():
    bn = BnParams.from_variance([0.0], [4.0], [1.0], [0.0], epsilon=1e-5)
    assert bn.std[0] == np.sqrt(4.0 + 1e-5)
    with pytest.raises(ContractError):
        BnParams([0.0], [1e-4], [1.0], [0.0])
    with pytest.raises(ContractError):
        BnParams([0.0, 1.0], [1.0], [1.0], [0.0])


@pytest.mark.parametrize("k,stride", [(1, 1), (2, 1), (3, 2), (2, 2)])
def test_avgpool_constant(k, stride):
    x = np.full((1, 2, 6, 6), 3.25)
    np.testing.assert_array_equal(avgpool2d(x, k, stride), np.full_like(avgpool2d(x, k, stride), 3.25))


def test_avgpool_mean():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert avgpool2d(x, 2, 2)[0, 0, 0, 0] == 2.5


def test_avgpool_counts_padding():
    out = avgpool2d(np.ones((1, 1, 3, 3)), 3, 1, padding=1)
    assert out[0, 0, 0, 0] == pytest.approx(4 / 9)
    assert out[0, 0, 1, 1] == pytest.approx(1.0)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 0), (3, 2, 1), (5, 2, 2), (2, 1, 0)])
def test_avgpool_equals_avg_conv(rng, k, stride, pad):
    x = rng.normal(size=(2, 3, 8, 7))
    conv = conv2d(x, avgpool_to_conv(3, k, stride, padding=pad))
    np.testing.assert_allclose(avgpool2d(x, k, stride, pad), conv, rtol=0, atol=1e-15)


def test_add_concat_rep():
    r = rep_bias([1.0, 2.0], 2, 2)
    assert r.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(r[0, 0], np.ones((2, 2)))
    np.testing.assert_array_equal(r[0, 1], np.full((2, 2), 2.0))

    a = np.arange(2 * 3 * 3.0).reshape(1, 2, 3, 3)
    b = -np.arange(3 * 3 * 3.0).reshape(1, 3, 3, 3)
    cat = concat_channels(a, b)
    assert cat.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(cat[:, :2], a)
    np.testing.assert_array_equal(cat[:, 2:], b)

    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    with pytest.raises(ContractError):
        add(a, b)
    with pytest.raises(ContractError):
        concat_channels(a, np.zeros((1, 1, 2, 3)))


def test_params_immutable():
    p = ConvParams(np.zeros((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        p.kernel[0, 0, 0, 0] = 1.0
