import numpy as np
import pytest

from mimicsim import autodiff as ad
from mimicsim.autodiff import jet


def grad_of(f, *xs):
    tape = ad.Tape()
    vs = [tape.leaf(x) for x in xs]
    out = f(*vs)
    return out, tape.backward(out, vs)


def central(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_record_add_and_mul_partials():
    tape = ad.Tape()
    a, b = tape.leaf(2.0), tape.leaf(3.0)
    s = a + b
    p = a * b
    assert float(s.value) == 5.0 and float(p.value) == 6.0
    assert tape.backward(s, [a, b]) == [1.0, 1.0]
    assert tape.backward(p, [a, b]) == [3.0, 2.0]


def test_swish_at_zero():
    tape = ad.Tape()
    assert float(ad.swish(tape.leaf(0.0)).value) == 0.0


def test_square_and_bilinear_gradients():
    _, (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == 6.0
    _, g = grad_of(lambda x, y: x * y + y, 2.0, 3.0)
    assert [float(v) for v in g] == [3.0, 3.0]


UNARY = {
    "exp": (ad.exp, np.exp, (-2, 2)),
    "log": (ad.log, np.log, (0.2, 3)),
    "tanh": (ad.tanh, np.tanh, (-2, 2)),
    "sigmoid": (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v)), (-4, 4)),
    "swish": (ad.swish, lambda v: v / (1 + np.exp(-v)), (-4, 4)),
    "sqrt": (ad.sqrt, np.sqrt, (0.2, 3)),
    "abs": (ad.absolute, np.abs, (-2, 2)),
    "neg": (lambda v: -v, lambda v: -v, (-2, 2)),
    "pow3": (lambda v: v**3, lambda v: v**3, (-2, 2)),
    "clamp": (lambda v: ad.clamp(v, -0.5, 0.5), lambda v: np.clip(v, -0.5, 0.5), (-2, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_match_finite_differences(name):
    f_ad, f_np, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    x = rng.uniform(lo, hi, 20)
    if name in ("abs", "clamp"):
        # keep the probes away from kinks
        x = x[np.min(np.abs(x[:, None] - np.array([0.0, -0.5, 0.5])), axis=1) > 1e-3]
    _, (g,) = grad_of(lambda v: f_ad(v).sum(), x)
    fd = central(lambda v: f_np(v).sum(), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


BINARY = {
    "add": (lambda a, b: a + b, lambda a, b: a + b),
    "sub": (lambda a, b: a - b, lambda a, b: a - b),
    "mul": (lambda a, b: a * b, lambda a, b: a * b),
    "div": (lambda a, b: a / b, lambda a, b: a / b),
    "min": (ad.minimum, np.minimum),
    "max": (ad.maximum, np.maximum),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_match_finite_differences(name):
    f_ad, f_np = BINARY[name]
    rng = np.random.default_rng(len(name))
    a = rng.uniform(0.5, 2, 20) * rng.choice([-1, 1], 20)
    b = rng.uniform(0.5, 2, 20)
    _, (ga, gb) = grad_of(lambda x, y: f_ad(x, y).sum(), a, b)
    np.testing.assert_allclose(ga, central(lambda x: f_np(x, b).sum(), a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central(lambda y: f_np(a, y).sum(), b), rtol=1e-6, atol=1e-9)


def test_min_max_ties_route_to_first_argument():
    _, (ga, gb) = grad_of(lambda a, b: ad.minimum(a, b), 1.0, 1.0)
    assert (float(ga), float(gb)) == (1.0, 0.0)
    _, (ga, gb) = grad_of(lambda a, b: ad.maximum(a, b), 1.0, 1.0)
    assert (float(ga), float(gb)) == (1.0, 0.0)


def test_abs_subgradient_zero_at_zero():
    _, (g,) = grad_of(ad.absolute, 0.0)
    assert float(g) == 0.0


def test_clamp_zero_gradient_outside_bounds():
    _, (g,) = grad_of(lambda x: ad.clamp(x, -1.0, 1.0).sum(), np.array([-2.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_select_gradient_follows_taken_branch():
    mask = np.array([True, False, True])
    _, (ga, gb) = grad_of(lambda a, b: ad.select(mask, a * 2.0, b * 3.0).sum(), np.ones(3), np.ones(3))
    np.testing.assert_array_equal(ga, [2, 0, 2])
    np.testing.assert_array_equal(gb, [0, 3, 0])


def test_stop_gradient_examples():
    _, (g,) = grad_of(lambda x: ad.stop_gradient(x) * x, 3.0)
    assert float(g) == 3.0
    tape = ad.Tape()
    x = tape.leaf(3.0)
    y = ad.stop_gradient(x) + 0.0
    assert tape.backward(y, [x])[0] == 0.0


def test_matmul_concat_index_reshape_sum():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    c = rng.standard_normal(5)

    def f_ad(a, b, v):
        m = ad.matmul(a, b).reshape(6)
        z = ad.concat([m, v[1:4]], axis=-1)
        return ad.tanh(z).sum() + (v[[0, 0, 4]] * 2.0).sum()

    def f_np(a, b, v):
        z = np.concatenate([(a @ b).reshape(6), v[1:4]])
        return np.tanh(z).sum() + (v[[0, 0, 4]] * 2.0).sum()

    _, (ga, gb, gc) = grad_of(f_ad, A, B, c)
    np.testing.assert_allclose(ga, central(lambda a: f_np(a, B, c), A), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gb, central(lambda b: f_np(A, b, c), B), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gc, central(lambda v: f_np(A, B, v), c), rtol=1e-6, atol=1e-9)


def test_matmul_with_vector_operands():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((3, 4))
    x = rng.standard_normal(3)
    y = rng.standard_normal(4)
    _, (gx, gA) = grad_of(lambda v, m: ad.tanh(ad.matmul(v, m)).sum(), x, A)
    np.testing.assert_allclose(gx, central(lambda v: np.tanh(v @ A).sum(), x), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gA, central(lambda m: np.tanh(x @ m).sum(), A), rtol=1e-6, atol=1e-9)
    _, (gA, gy) = grad_of(lambda m, v: ad.tanh(ad.matmul(m, v)).sum(), A, y)
    np.testing.assert_allclose(gy, central(lambda v: np.tanh(A @ v).sum(), y), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gA, central(lambda m: np.tanh(m @ y).sum(), A), rtol=1e-6, atol=1e-9)


def test_broadcasting_is_summed_back():
    x = np.arange(3.0)
    _, (gx, gb) = grad_of(lambda v, b: (v * b).sum(), x, np.array(2.0))
    np.testing.assert_array_equal(gx, [2.0, 2.0, 2.0])
    assert float(gb) == 3.0


def test_linear_node_uses_given_jacobians():
    rng = np.random.default_rng(1)
    J = rng.standard_normal((2, 3, 4))
    x0 = rng.standard_normal((2, 4))
    tape = ad.Tape()
    x = tape.leaf(x0)
    y = ad.linear("lin", [x], np.einsum("boi,bi->bo", J, x0), [J])
    w = rng.standard_normal((2, 3))
    (g,) = tape.backward((y * w).sum(), [x])
    np.testing.assert_allclose(g, np.einsum("bo,boi->bi", w, J), atol=1e-14)


def test_blocked_nodes_stop_adjoint_flow():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    y = tape.record("carry", [x * 3.0], 6.0, [ad.Pullback(lambda g: g)])
    z = y * y + x
    (free,) = tape.backward(z, [x])
    (cut,) = tape.backward(z, [x], blocked=[y.index])
    assert float(free) == 2 * 6.0 * 3.0 + 1.0
    assert float(cut) == 1.0


def test_adjoint_hook_sees_every_node():
    tape = ad.Tape()
    x = tape.leaf(1.5)
    y = ad.exp(x)
    tape.adjoint_hook = lambda i, op, g: 2.0 * g if op == "exp" else g
    (g,) = tape.backward(y, [x])
    assert float(g) == pytest.approx(2.0 * np.exp(1.5), rel=1e-15)


def test_errors():
    with pytest.raises(ad.TapeError):
        ad.Tape().backward(ad.Tape().constant(1.0))
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ad.TapeError):
        t1.leaf(1.0) + t2.leaf(2.0)
    with pytest.raises(ad.TapeError):
        t1.backward(t1.leaf(np.ones(3)))


def test_backward_is_deterministic_and_leaves_values_untouched():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10)
    tape = ad.Tape()
    v = tape.leaf(x)
    out = (ad.swish(v) * ad.tanh(v)).sum()
    before = [np.array(tape._values[i]) for i in range(len(tape))]
    g1 = tape.backward(out, [v])[0]
    g2 = tape.backward(out, [v])[0]
    assert np.array_equal(g1, g2)
    for i, b in enumerate(before):
        assert np.array_equal(tape._values[i], b)


def test_gradient_is_linear_over_independent_sums():
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal((2, 5))

    def f(v):
        return (ad.sigmoid(v) * v).sum()

    tape = ad.Tape()
    a, b = tape.leaf(x1), tape.leaf(x2)
    ga, gb = tape.backward(f(a) + f(b), [a, b])
    _, (ga1,) = grad_of(f, x1)
    _, (gb1,) = grad_of(f, x2)
    np.testing.assert_allclose(ga, ga1, atol=1e-15)
    np.testing.assert_allclose(gb, gb1, atol=1e-15)


def test_jet_forward_mode_matches_tape():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 1.5, 4)
    j = jet.seed(x, 0, 4)
    out = np.tanh(j) * np.exp(j) / (1.0 + j * j)
    tape = ad.Tape()
    v = tape.leaf(x)
    (g,) = tape.backward((ad.tanh(v) * ad.exp(v) / (1.0 + v * v)).sum(), [v])
    np.testing.assert_allclose(jet.value(out), np.tanh(x) * np.exp(x) / (1 + x * x), rtol=1e-15)
    np.testing.assert_allclose(out.dot.sum(axis=0), g, rtol=1e-13)
