import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import hcsc.tensor_core as tc
from hcsc.errors import ShapeError

from oracles import (central_difference, conv_full_bruteforce, corr_valid_bruteforce,
                     rel_err, soft_threshold_grid)


@pytest.fixture(params=tc.available_backends())
def backend(request):
    previous = tc.use_backend(request.param)
    yield request.param
    tc.use_backend(previous)


def test_compiled_backend_is_default_when_built():
    if "compiled" in tc.available_backends():
        assert tc.BACKEND == "compiled"


def test_conv_full_zero_signal(backend):
    A = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    out = tc.conv_full(A, np.zeros((3, 6, 7), np.float32))
    assert out.shape == (2, 9, 11)
    assert not out.any()


def test_conv_full_delta_reproduces_kernel(backend):
    # true convolution: a unit impulse convolved with k returns k itself
    k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = tc.conv_full(k, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(out[0], k[0, 0])
    np.testing.assert_allclose(conv_full_bruteforce(k, np.ones((1, 1, 1)))[0], k[0, 0])


def test_corr_valid_of_padded_delta_flips_kernel(backend):
    k = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = np.zeros((1, 3, 3))
    y[0, 1, 1] = 1.0
    out = tc.corr_valid(y, k)
    np.testing.assert_array_equal(out[0], k[0, 0, ::-1, ::-1])


def test_conv_full_mnist_layer_shape(backend):
    out = tc.conv_full(np.ones((1, 1, 5, 5)), np.ones((1, 24, 24)))
    assert out.shape == (1, 28, 28)


def test_corr_valid_mnist_gradient_shape(backend):
    assert tc.corr_valid(np.ones((1, 28, 28)), np.ones((1, 1, 5, 5))).shape == (1, 24, 24)


def test_corr_valid_zero_signal(backend):
    out = tc.corr_valid(np.zeros((2, 8, 8), np.float32), np.ones((2, 3, 3, 3)))
    assert out.shape == (3, 6, 6) and not out.any()


@pytest.mark.parametrize("seed", range(4))
def test_kernels_match_bruteforce(backend, seed):
    rng = np.random.default_rng(seed)
    C, D = rng.integers(1, 4, size=2)
    H, W = rng.integers(1, 4, size=2)
    h, w = rng.integers(1, 6, size=2)
    A = rng.standard_normal((C, D, H, W))
    x = rng.standard_normal((D, h, w))
    y = rng.standard_normal((C, h + H - 1, w + W - 1))
    np.testing.assert_allclose(tc.conv_full(A, x), conv_full_bruteforce(A, x), atol=1e-12)
    np.testing.assert_allclose(tc.corr_valid(y, A), corr_valid_bruteforce(y, A), atol=1e-12)


def test_sparse_planes_match_bruteforce(backend):
    rng = np.random.default_rng(9)
    A = rng.standard_normal((2, 4, 3, 3))
    x = rng.standard_normal((4, 10, 9)) * (rng.uniform(size=(4, 10, 9)) < 0.05)
    x[1] = 0.0
    np.testing.assert_allclose(tc.conv_full(A, x), conv_full_bruteforce(A, x), atol=1e-12)
    x32 = x.astype(np.float32)
    assert rel_err(tc.conv_full(A.astype(np.float32), x32),
                   conv_full_bruteforce(A, x32)) <= 1e-6


def test_small_adjoint_example(backend):
    rng = np.random.default_rng(7)
    A = rng.standard_normal((1, 1, 2, 2))
    x = rng.standard_normal((1, 2, 2))
    y = rng.standard_normal((1, 3, 3))
    lhs = tc.inner_product(tc.conv_full(A, x), y)
    rhs = tc.inner_product(x, tc.corr_valid(y, A))
    assert abs(lhs - rhs) <= 1e-5 * (1 + abs(lhs))


def test_batched_equals_per_example(backend):
    rng = np.random.default_rng(3)
    A = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    x = rng.standard_normal((4, 3, 6, 5)).astype(np.float32)
    batched = tc.conv_full(A, x)
    for n in range(4):
        np.testing.assert_array_equal(batched[n], tc.conv_full(A, x[n]))


def test_float32_storage_and_float64_passthrough(backend):
    A = np.ones((1, 1, 2, 2))
    assert tc.conv_full(A.astype(np.float32), np.ones((1, 3, 3), np.float32)).dtype == np.float32
    assert tc.conv_full(A, np.ones((1, 3, 3))).dtype == np.float64


def test_backends_agree():
    if len(tc.available_backends()) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(11)
    A = rng.standard_normal((1, 32, 5, 5)).astype(np.float32)
    u = rng.standard_normal((3, 32, 24, 24)).astype(np.float32)
    r = rng.standard_normal((3, 1, 28, 28)).astype(np.float32)
    results = {}
    for name in tc.available_backends():
        previous = tc.use_backend(name)
        try:
            results[name] = (tc.conv_full(A, u), tc.corr_valid(r, A),
                             tc.corr_filter_grad(r, u, 5, 5))
        finally:
            tc.use_backend(previous)
    for a, b in zip(results["compiled"], results["numpy"]):
        assert rel_err(a, b) <= 1e-6


def test_shape_errors(backend):
    with pytest.raises(ShapeError, match=r"\(1, 2, 3, 3\)"):
        tc.conv_full(np.ones((1, 2, 3, 3)), np.ones((3, 4, 4)))
    with pytest.raises(ShapeError, match="larger"):
        tc.corr_valid(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        tc.corr_filter_grad(np.ones((1, 4, 4)), np.ones((1, 2, 2)), 2, 2)


# --- filter gradient --------------------------------------------------------

def test_filter_grad_zero_residual(backend):
    g = tc.corr_filter_grad(np.zeros((1, 3, 3)), np.ones((1, 2, 2)), 2, 2)
    assert g.shape == (1, 1, 2, 2) and not g.any()


def test_filter_grad_stationary_at_exact_fit(backend):
    rng = np.random.default_rng(2)
    A = rng.standard_normal((1, 1, 2, 2))
    x1 = rng.standard_normal((1, 2, 2))
    x0 = tc.conv_full(A, x1)
    g = tc.corr_filter_grad(tc.conv_full(A, x1) - x0, x1, 2, 2)
    assert np.abs(g).max() == 0.0


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-3)])
def test_filter_grad_matches_finite_differences(backend, dtype, tol):
    rng = np.random.default_rng(5)
    code = rng.standard_normal((2, 3, 3))
    target = rng.standard_normal((2, 5, 5))
    A = rng.standard_normal((2, 2, 3, 3))

    def loss(a):
        r = conv_full_bruteforce(a, code) - target
        return 0.5 * float(np.sum(r * r))

    fd = central_difference(loss, A)
    res = tc.conv_full(A.astype(dtype), code.astype(dtype)) - target.astype(dtype)
    g = tc.corr_filter_grad(res, code.astype(dtype), 3, 3)
    assert rel_err(g, fd) <= tol


def test_filter_grad_example_shapes(backend):
    rng = np.random.default_rng(1)
    code = rng.standard_normal((1, 2, 2))
    target = rng.standard_normal((1, 3, 3))
    A = rng.standard_normal((1, 1, 2, 2))

    def loss(a):
        r = conv_full_bruteforce(a, code) - target
        return 0.5 * float(np.sum(r * r))

    g = tc.corr_filter_grad(tc.conv_full(A, code) - target, code, 2, 2)
    assert rel_err(g, central_difference(loss, A)) <= 1e-6


# --- prox and reductions ----------------------------------------------------

def test_soft_threshold_examples():
    out = tc.soft_threshold(np.array([2.0, -0.5, -3.0]), 1.0)
    np.testing.assert_array_equal(out, [1.0, 0.0, -2.0])


def test_soft_threshold_zero_is_identity():
    b = np.random.default_rng(0).standard_normal(50).astype(np.float32)
    np.testing.assert_array_equal(tc.soft_threshold(b, 0.0), b)


def test_soft_threshold_rejects_negative():
    with pytest.raises(ValueError):
        tc.soft_threshold(np.ones(3), -0.1)


def test_soft_threshold_matches_grid_search():
    rng = np.random.default_rng(0)
    b = rng.uniform(-3, 3, size=200)
    lam = rng.uniform(0, 2, size=200)
    for bi, li in zip(b, lam):
        assert abs(tc.soft_threshold(np.array([bi]), li)[0] - soft_threshold_grid(bi, li)) <= 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20),
       st.lists(st.floats(-10, 10), min_size=1, max_size=20),
       st.floats(0, 5))
def test_soft_threshold_nonexpansive(a, b, lam):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    lhs = np.linalg.norm(tc.soft_threshold(a, lam) - tc.soft_threshold(b, lam))
    assert lhs <= np.linalg.norm(a - b) + 1e-12


def test_reductions():
    z = np.zeros((2, 3, 3))
    assert tc.norm_l1(z) == tc.norm_l2_sq(z) == tc.inner_product(z, z) == 0.0
    t = np.array([3.0, -4.0])
    assert tc.norm_l1(t) == 7.0 and tc.norm_l2_sq(t) == 25.0
    r = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    assert tc.inner_product(r, r) == pytest.approx(tc.norm_l2_sq(r), rel=1e-12)


def test_reductions_accumulate_in_float64():
    t = np.full(10**6, 0.1, dtype=np.float32)
    assert tc.norm_l1(t) == pytest.approx(10**6 * float(np.float32(0.1)), rel=1e-12)


# --- properties -------------------------------------------------------------

shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
                   st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_shape_laws_and_adjoint(shape, seed):
    C, D, H, W, h, w = shape
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((C, D, H, W)).astype(np.float32)
    x = rng.standard_normal((D, h, w)).astype(np.float32)
    y = rng.standard_normal((C, h + H - 1, w + W - 1)).astype(np.float32)
    Ax = tc.conv_full(A, x)
    yA = tc.corr_valid(y, A)
    assert Ax.shape == (C, h + H - 1, w + W - 1)
    assert yA.shape == (D, h, w)
    lhs, rhs = tc.inner_product(Ax, y), tc.inner_product(x, yA)
    assert abs(lhs - rhs) <= 1e-5 * (1 + abs(lhs))


@settings(max_examples=30, deadline=None)
@given(shapes, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_conv_full_linearity(shape, alpha, beta, seed):
    C, D, H, W, h, w = shape
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((C, D, H, W))
    x, y = rng.standard_normal((2, D, h, w))
    lhs = tc.conv_full(A, alpha * x + beta * y)
    rhs = alpha * tc.conv_full(A, x) + beta * tc.conv_full(A, y)
    assert np.linalg.norm(lhs - rhs) <= 1e-6 * (1 + np.linalg.norm(rhs))
