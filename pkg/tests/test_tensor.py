"""Tensor engine tests: the finite-difference oracle first, then every
operator's values and gradients against it."""

from __future__ import annotations

import numpy as np
import pytest

from hdrkit.errors import ConfigError, ContractError, DomainError, ShapeError
from hdrkit.tensor import (
    Parameter,
    Tensor,
    absolute,
    add,
    add_scalar,
    backward,
    concat_channels,
    conv2d,
    exp,
    finite_diff_grad,
    log,
    mean,
    mul,
    relative_gradient_error,
    relu,
    scale,
    sub,
    sum_all,
    sum_all as tsum,
    tanh,
)


# ---------------------------------------------------------------------------
# the oracle itself


def test_finite_diff_square_closed_form():
    p = Parameter(np.array([3.0], dtype=np.float64), "p")
    g = finite_diff_grad(lambda: float(p.data[0]) ** 2, p, eps=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_diff_constant_is_zero():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float64), "p")
    g = finite_diff_grad(lambda: 42.0, p, eps=1e-5)
    assert np.all(g == 0.0)


def test_finite_diff_relu_closed_form():
    p = Parameter(np.array([-1.0, 2.0], dtype=np.float64), "p")
    g = finite_diff_grad(lambda: float(np.sum(np.maximum(p.data, 0))), p, eps=1e-5)
    assert np.allclose(g, [0.0, 1.0], atol=1e-9)


def test_finite_diff_restores_parameter():
    p = Parameter(np.array([0.5, -0.25], dtype=np.float64), "p")
    before = p.data.copy()
    finite_diff_grad(lambda: float(np.sum(p.data ** 3)), p, eps=1e-5)
    assert np.array_equal(p.data, before)


def test_finite_diff_rejects_bad_eps():
    p = Parameter(np.zeros(1, dtype=np.float64), "p")
    with pytest.raises(ConfigError):
        finite_diff_grad(lambda: 0.0, p, eps=0.0)


# ---------------------------------------------------------------------------
# operator values


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float64))
    w = np.zeros((1, 1, 3, 3), dtype=np.float64)
    w[0, 0, 1, 1] = 1.0
    out = conv2d(x, Tensor(w), Tensor(np.zeros(1, dtype=np.float64)))
    assert np.array_equal(out.data, x.data)


def test_conv2d_hand_value():
    x = Tensor(np.array([2.0, 3.0], dtype=np.float64).reshape(1, 2, 1, 1))
    w = Tensor(np.array([0.5, -1.0], dtype=np.float64).reshape(1, 2, 1, 1))
    b = Tensor(np.array([0.25], dtype=np.float64))
    out = conv2d(x, w, b)
    assert out.shape == (1, 1, 1, 1)
    assert abs(out.item() - (-1.75)) < 1e-12


def test_conv2d_annihilator():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 5, 4)))
    w = Tensor(np.zeros((4, 3, 3, 3), dtype=np.float64))
    b = Tensor(np.zeros(4, dtype=np.float64))
    out = conv2d(x, w, b)
    assert out.shape == (2, 4, 5, 4)
    assert np.all(out.data == 0.0)


def test_relu_values():
    out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    allneg = relu(Tensor(np.array([-3.0, -0.5])))
    assert np.all(allneg.data == 0.0)


def test_relu_gradient_matches_oracle():
    p = Parameter(np.array([-1.0, 2.0], dtype=np.float64), "p")
    loss = tsum(relu(p.value))
    backward(loss)
    fd = finite_diff_grad(lambda: float(np.sum(np.maximum(p.data, 0))), p)
    assert np.allclose(p.grad, [0.0, 1.0], atol=0)
    assert relative_gradient_error(p.grad, fd) < 1e-4


def test_tanh_values():
    assert tanh(Tensor(np.array([0.0]))).data[0] == 0.0
    big = tanh(Tensor(np.array([20.0], dtype=np.float64)))
    assert abs(big.data[0] - 1.0) < 1e-6


def test_tanh_gradient_at_zero_exact():
    p = Parameter(np.array([0.0], dtype=np.float64), "p")
    backward(tsum(tanh(p.value)))
    assert p.grad[0] == 1.0
    fd = finite_diff_grad(lambda: float(np.sum(np.tanh(p.data))), p)
    assert relative_gradient_error(p.grad, fd) < 1e-4


def test_add_values():
    a = Tensor(np.array([1.0, 2.0]))
    z = add(a, Tensor(np.zeros(2)))
    assert np.array_equal(z.data, a.data)
    s = add(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0])))
    assert np.array_equal(s.data, [4.0, 6.0])


def test_add_gradient_all_ones():
    a = Parameter(np.array([1.0, -2.0], dtype=np.float64), "a")
    b = Tensor(np.array([3.0, 4.0], dtype=np.float64))
    backward(tsum(add(a.value, b)))
    fd = finite_diff_grad(lambda: float(np.sum(a.data + b.data)), a)
    assert np.array_equal(a.grad, np.ones(2))
    assert relative_gradient_error(a.grad, fd) < 1e-4


def test_concat_shapes_and_roundtrip():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((1, 2, 4, 4)))
    b = Tensor(rng.standard_normal((1, 3, 4, 4)))
    out = concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    assert np.array_equal(out.data[:, :2], a.data)
    assert np.array_equal(out.data[:, 2:], b.data)


def test_concat_with_zero_channels():
    a = Tensor(np.random.default_rng(2).standard_normal((1, 3, 2, 2)))
    empty = Tensor(np.zeros((1, 0, 2, 2)))
    out = concat_channels(a, empty)
    assert np.array_equal(out.data, a.data)


def test_backward_linear_map():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4,)))
    w = Parameter(rng.standard_normal((4,)), "w")
    backward(tsum(mul(w.value, x)))
    assert np.allclose(w.grad, x.data)


def test_backward_detached_parameter_zero_grad():
    p = Parameter(np.ones(3, dtype=np.float64), "p")
    other = Tensor(np.ones(3, dtype=np.float64), requires_grad=True)
    backward(tsum(other))
    assert np.all(p.grad == 0.0)
    assert p.value.grad is None


def test_backward_rejects_nonscalar():
    t = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        backward(t)


def test_gradient_accumulates_on_reuse():
    p = Parameter(np.array([1.5], dtype=np.float64), "p")
    backward(tsum(add(p.value, p.value)))
    assert p.grad[0] == 2.0


# ---------------------------------------------------------------------------
# gradients of every differentiable op against the oracle


def _check_param_grad(build, p, tol=1e-4):
    """backward() gradient of scalar build() vs. central finite differences."""
    p.zero_grad()
    loss = build()
    backward(loss)
    analytic = p.grad.copy()
    p.zero_grad()
    # evaluate without recording history: only the value matters to the oracle
    p.value.requires_grad = False
    fd = finite_diff_grad(lambda: build().item(), p)
    p.value.requires_grad = True
    err = relative_gradient_error(analytic, fd)
    assert err < tol, f"{p.name}: relative gradient error {err}"


def test_grad_conv2d_weight_bias_input():
    rng = np.random.default_rng(10)
    x = Parameter(rng.standard_normal((2, 3, 5, 5)), "x")
    w = Parameter(rng.standard_normal((4, 3, 3, 3)) * 0.3, "w")
    b = Parameter(rng.standard_normal(4) * 0.1, "b")
    build = lambda: mean(conv2d(x.value, w, b, dilation=1))
    for p in (x, w, b):
        _check_param_grad(build, p)


def test_grad_conv2d_dilated():
    rng = np.random.default_rng(11)
    x = Parameter(rng.standard_normal((1, 2, 7, 6)), "x")
    w = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.3, "w")
    b = Parameter(np.zeros(3, dtype=np.float64), "b")
    build = lambda: mean(tanh(conv2d(x.value, w, b, dilation=2)))
    for p in (x, w):
        _check_param_grad(build, p)


def test_grad_conv2d_1x1():
    rng = np.random.default_rng(12)
    x = Parameter(rng.standard_normal((1, 4, 3, 3)), "x")
    w = Parameter(rng.standard_normal((2, 4, 1, 1)) * 0.5, "w")
    b = Parameter(rng.standard_normal(2) * 0.1, "b")
    build = lambda: mean(conv2d(x.value, w, b))
    for p in (x, w, b):
        _check_param_grad(build, p)


def test_grad_pointwise_ops():
    rng = np.random.default_rng(13)
    # keep relu/absolute inputs away from their kinks
    base = rng.uniform(0.2, 1.5, size=(2, 3)) * rng.choice([-1.0, 1.0], size=(2, 3))
    p = Parameter(base, "p")
    builds = [
        lambda: mean(relu(p.value)),
        lambda: mean(tanh(p.value)),
        lambda: mean(absolute(p.value)),
        lambda: mean(exp(scale(p.value, 0.3))),
        lambda: sum_all(scale(add_scalar(p.value, 2.0), -0.7)),
        lambda: mean(log(add_scalar(absolute(p.value), 1.0))),
    ]
    for build in builds:
        p.zero_grad()
        _check_param_grad(build, p)


def test_grad_binary_and_concat():
    rng = np.random.default_rng(14)
    a = Parameter(rng.standard_normal((1, 2, 3, 3)), "a")
    b = Parameter(rng.standard_normal((1, 2, 3, 3)), "b")
    c = Parameter(rng.standard_normal((1, 1, 3, 3)), "c")
    builds = [
        lambda: mean(add(a.value, b.value)),
        lambda: mean(sub(a.value, b.value)),
        lambda: mean(mul(a.value, b.value)),
        lambda: mean(concat_channels(a.value, c.value)),
        lambda: mean(tanh(concat_channels(mul(a.value, b.value), c.value))),
    ]
    for build in builds:
        for p in (a, b, c):
            p.zero_grad()
        loss = build()
        backward(loss)
        for p in (a, b, c):
            if p.value.grad is None:
                continue
            analytic = p.grad.copy()
            p.zero_grad()
            for q in (a, b, c):
                q.value.requires_grad = False
            fd = finite_diff_grad(lambda: build().item(), p)
            for q in (a, b, c):
                q.value.requires_grad = True
            assert relative_gradient_error(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# invariants


def test_shape_safety_randomized():
    rng = np.random.default_rng(20)
    for _ in range(25):
        n, cin, h, w = (int(rng.integers(1, 9)) for _ in range(4))
        cout = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5]))
        dil = int(rng.integers(1, 4))
        x = Tensor(rng.standard_normal((n, cin, h, w)))
        wt = Tensor(rng.standard_normal((cout, cin, k, k)))
        bias = Tensor(rng.standard_normal(cout))
        out = conv2d(x, wt, bias, dilation=dil)
        assert out.shape == (n, cout, h, w)

        c2 = int(rng.integers(0, 9))
        other = Tensor(rng.standard_normal((n, c2, h, w)))
        cat = concat_channels(x, other)
        assert cat.shape == (n, cin + c2, h, w)


def test_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    w = Tensor(np.zeros((2, 5, 3, 3)))
    b = Tensor(np.zeros(2))
    with pytest.raises(ShapeError) as ei:
        conv2d(x, w, b)
    assert "3" in str(ei.value) and "5" in str(ei.value)
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 4))))
    with pytest.raises(ConfigError):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), b, dilation=0)
    with pytest.raises(ConfigError):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), b, padding="valid")


def test_conv2d_linearity_float64():
    rng = np.random.default_rng(21)
    a = rng.standard_normal((1, 2, 6, 6))
    b = rng.standard_normal((1, 2, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    zero_b = Tensor(np.zeros(3, dtype=np.float64))
    alpha, beta = 0.7, -1.3
    lhs = conv2d(Tensor(alpha * a + beta * b), w, zero_b).data
    rhs = alpha * conv2d(Tensor(a), w, zero_b).data + beta * conv2d(Tensor(b), w, zero_b).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_determinism_bit_identical():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    r1 = conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2).data
    r2 = conv2d(Tensor(x.copy()), Tensor(w.copy()), Tensor(b.copy()), dilation=2).data
    assert np.array_equal(r1, r2)


def test_float64_stays_float64():
    rng = np.random.default_rng(23)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    assert x.dtype == np.float64
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    b = Tensor(np.zeros(2, dtype=np.float64))
    chain = mean(absolute(tanh(relu(conv2d(x, w, b)))))
    assert chain.dtype == np.float64
    assert add(x, x).dtype == np.float64


def test_int_input_casts_to_float32():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float32


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor(np.array([1.0, 0.0])))


def test_parameter_basics():
    p = Parameter(np.ones((2, 2), dtype=np.float32), "layer.weight")
    assert p.name == "layer.weight"
    assert p.value.requires_grad
    assert np.all(p.grad == 0.0)
    backward(mean(p.value))
    assert p.value.grad is not None
    p.zero_grad()
    assert p.value.grad is None


def test_grad_dtype_and_shape_match_data():
    p = Parameter(np.ones((3, 2), dtype=np.float32), "p")
    backward(mean(relu(p.value)))
    assert p.value.grad.shape == p.data.shape
    assert p.value.grad.dtype == p.data.dtype
