import numpy as np
import pytest

from prombayes import autodiff as ad


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        up, um = x.copy(), x.copy()
        up[i] += h
        um[i] -= h
        g[i] = (ad.grad(f, up)[0] - ad.grad(f, um)[0]) / (2 * h)
    return g


def test_square_at_three():
    value, grad = ad.grad(lambda x: x[0] * x[0], np.array([3.0]))
    assert value == 9.0
    assert grad[0] == 6.0


def test_logsumexp_symmetry():
    value, grad = ad.grad(lambda x: ad.logsumexp(x, axis=0), np.array([0.0, 0.0]))
    assert value == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(grad, [0.5, 0.5], atol=1e-14)


UNARY_CASES = [
    (ad.exp, np.exp, (-3.0, 3.0)),
    (ad.log, lambda x: 1.0 / x, (0.1, 10.0)),
    (ad.log1p, lambda x: 1.0 / (1.0 + x), (-0.9, 5.0)),
    (ad.sqrt, lambda x: 0.5 / np.sqrt(x), (0.1, 10.0)),
    (ad.sigmoid, lambda x: _sig(x) * (1 - _sig(x)), (-8.0, 8.0)),
    (ad.log_sigmoid, lambda x: _sig(-x), (-8.0, 8.0)),
]


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


@pytest.mark.parametrize("fn,deriv,rng_range", UNARY_CASES)
def test_unary_chain_rule_spot_checks(fn, deriv, rng_range):
    rng = np.random.default_rng(12)
    xs = rng.uniform(*rng_range, size=100)
    for x0 in xs:
        _, grad = ad.grad(lambda v: ad.vsum(fn(v)), np.array([x0]))
        expected = deriv(x0)
        assert abs(grad[0] - expected) <= 1e-10 * max(1.0, abs(expected))


def test_binary_ops_against_closed_form():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = rng.uniform(0.5, 2.0, 2)
        x0 = np.array([a, b])
        _, g = ad.grad(lambda v: v[0] * v[1] + v[0] / v[1] - v[1] ** 3, x0)
        np.testing.assert_allclose(
            g, [b + 1 / b, a - a / b**2 - 3 * b**2], rtol=1e-12)


def test_linearity_of_grad():
    rng = np.random.default_rng(77)
    x0 = rng.normal(size=4)

    def f(v):
        return ad.vsum(ad.exp(v) * np.array([0.2, 0.1, 0.4, 0.3]))

    def g(v):
        return ad.logsumexp(2.0 * v, axis=0)

    for _ in range(20):
        a, b = rng.normal(size=2)
        _, ga = ad.grad(f, x0)
        _, gb = ad.grad(g, x0)
        _, gc = ad.grad(lambda v: a * f(v) + b * g(v), x0)
        np.testing.assert_allclose(gc, a * ga + b * gb, atol=1e-12)


def test_matvec_take_stack_dot():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(5, 3))
    w = rng.normal(size=5)
    idx = np.array([0, 2, 2, 1])

    def f(v):
        y = ad.matvec(A, v)
        z = ad.take(y, np.array([0, 1, 2, 3, 4]))
        s = ad.stack([v[0], v[1] * v[2], 1.0 + v[2]])
        return ad.dot(z, w) + ad.vsum(s * np.array([1.0, 2.0, 3.0])) \
            + ad.vsum(ad.take(v, idx))

    x0 = rng.normal(size=3)
    _, g = ad.grad(f, x0)
    np.testing.assert_allclose(g, fd_gradient(f, x0), rtol=1e-6, atol=1e-9)


def test_take_accumulates_repeated_indices():
    idx = np.array([1, 1, 1])
    _, g = ad.grad(lambda v: ad.vsum(ad.take(v, idx)), np.zeros(3))
    np.testing.assert_allclose(g, [0.0, 3.0, 0.0])


def test_clamp_min_subgradient():
    _, g = ad.grad(lambda v: ad.vsum(ad.clamp_min(v, 0.5)), np.array([0.2, 0.9]))
    np.testing.assert_allclose(g, [0.0, 1.0])


def test_broadcasting_unbroadcast():
    # (k, n) <- (n,) and (k, 1) parents must receive reduced adjoints.
    y = np.arange(6.0).reshape(2, 3)

    def f(v):
        col = v[0] * np.ones((2, 1))
        row = v[1:] * np.ones(3)
        return ad.vsum((col + row) * y)

    x0 = np.array([0.3, 1.0, -1.0, 2.0])
    _, g = ad.grad(f, x0)
    np.testing.assert_allclose(g, fd_gradient(f, x0), rtol=1e-6)


def test_value_matches_plain_evaluation_bitwise():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=6)

    def f(v):
        return ad.vsum(ad.log_sigmoid(v * 2.0)) - ad.logsumexp(v, axis=0) \
            + ad.dot(ad.exp(v), np.ones(6))

    plain = f(x0)
    taped, _ = ad.grad(f, x0)
    assert taped == plain


def test_scalar_function_required():
    with pytest.raises(ValueError):
        ad.grad(lambda v: v * 2.0, np.array([1.0, 2.0]))


def test_unsupported_primitive_raises():
    def f(v):
        return np.sin(v)

    with pytest.raises(TypeError):
        ad.grad(f, np.array([1.0]))


def test_nonfinite_intermediate_reported_with_node():
    def f(v):
        return ad.vsum(ad.log(v))

    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="node"):
            ad.grad(f, np.array([-1.0]), check_finite=True)


def test_random_composition_matches_fd():
    rng = np.random.default_rng(31)

    def f(v):
        a = ad.sigmoid(v[0] - v[1])
        b = ad.log1p(ad.exp(v[2]))
        m = ad.stack([v * 1.0, v * v])
        return a * b + ad.vsum(ad.logsumexp(m, axis=0)) + ad.clamp_min(v[1], -10.0)

    for _ in range(10):
        x0 = rng.normal(size=3)
        _, g = ad.grad(f, x0)
        np.testing.assert_allclose(g, fd_gradient(f, x0), rtol=1e-5, atol=1e-8)
