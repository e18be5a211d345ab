import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bdsg import autodiff as ad
from bdsg.errors import NumericError, ShapeError

from conftest import central_diff, rel_err

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
positive = st.floats(0.2, 3.0, allow_nan=False, allow_infinity=False)

# op name -> (tape fn, domain strategy)
UNARY = {
    "exp": (ad.exp, finite),
    "log": (ad.log, positive),
    "sqrt": (ad.sqrt, positive),
    "tanh": (ad.tanh, finite),
    "sigmoid": (ad.sigmoid, finite),
    "softplus": (ad.softplus, finite),
    "elu": (ad.elu, finite),
    "square": (ad.square, finite),
    "neg": (ad.neg, finite),
    "cube": (lambda a: ad.power(a, 3), finite),
}


def _scalar_loss(fn, x):
    leaf = ad.Var(x)
    out = ad.sum_(ad.mul(fn(leaf), np.linspace(0.5, 1.5, x.size).reshape(x.shape)))
    return out, leaf


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_unary_gradients_match_finite_differences(name, data):
    fn, elems = UNARY[name]
    x = data.draw(arrays(np.float64, (2, 3), elements=elems))
    # ELU is not differentiable at 0; keep the probe away from the kink
    if name == "elu":
        x = np.where(np.abs(x) < 1e-3, 0.1, x)
    loss, leaf = _scalar_loss(fn, x)
    (g,) = ad.grad(loss, [leaf])
    fd = central_diff(lambda v: float(_scalar_loss(fn, v)[0].value), x)
    assert rel_err(g, fd) < 1e-4


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div,
    "matmul": ad.matmul,
    "minimum": ad.minimum, "maximum": ad.maximum,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@settings(max_examples=100, deadline=None)
@given(a=arrays(np.float64, (3, 3), elements=positive), b=arrays(np.float64, (3, 3), elements=positive))
def test_binary_gradients_match_finite_differences(name, a, b):
    fn = BINARY[name]
    if name in ("minimum", "maximum"):
        b = np.where(np.abs(a - b) < 1e-3, b + 0.1, b)
    w = np.arange(1.0, 10.0).reshape(3, 3)

    def loss_of(x, y):
        return ad.sum_(ad.mul(fn(x, y), w))

    va, vb = ad.Var(a), ad.Var(b)
    ga, gb = ad.grad(loss_of(va, vb), [va, vb])
    fa = central_diff(lambda v: float(loss_of(v, b)), a)
    fb = central_diff(lambda v: float(loss_of(a, v)), b)
    assert rel_err(ga, fa) < 1e-4
    assert rel_err(gb, fb) < 1e-4


@settings(max_examples=100, deadline=None)
@given(m=arrays(np.float64, (2, 3, 3), elements=finite))
def test_logabsdet_gradient(m):
    m = m + 7 * np.eye(3)   # strictly diagonally dominant, so never singular
    leaf = ad.Var(m)
    (g,) = ad.grad(ad.sum_(ad.logabsdet(leaf)), [leaf])
    fd = central_diff(lambda v: float(np.sum(np.linalg.slogdet(v)[1])), m)
    assert rel_err(g, fd) < 1e-4


def test_broadcast_reductions_and_indexing(rng):
    x = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))

    def f(xv, bv):
        y = ad.tanh(ad.add(xv, bv))
        return ad.mean(ad.sum_(ad.mul(y, y), axis=1)) + ad.sum_(ad.take(y, (slice(None), 0)))

    vx, vb = ad.Var(x), ad.Var(b)
    gx, gb = ad.grad(f(vx, vb), [vx, vb])
    assert rel_err(gx, central_diff(lambda v: float(f(v, b)), x)) < 1e-4
    assert rel_err(gb, central_diff(lambda v: float(f(x, v)), b)) < 1e-4


def test_stack_transpose_reshape(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def f(x, y):
        s = ad.stack([x, ad.exp(y)], axis=1)       # (2, 2, 3)
        r = ad.reshape(s, (4, 3))
        return ad.sum_(ad.matmul(ad.transpose(r), r))

    va, vb = ad.Var(a), ad.Var(b)
    ga, gb = ad.grad(f(va, vb), [va, vb])
    assert rel_err(ga, central_diff(lambda v: float(f(v, b)), a)) < 1e-4
    assert rel_err(gb, central_diff(lambda v: float(f(a, v)), b)) < 1e-4


def test_sum_of_squares_gradient_is_six():
    w = ad.Var(np.array([3.0]))
    (g,) = ad.grad(ad.sum_(ad.square(w)), [w])
    assert g.tolist() == [6.0]


def test_unused_parameter_gets_exact_zero():
    w, b = ad.Var(np.ones(3)), ad.Var(np.ones(2))
    gw, gb = ad.grad(ad.sum_(ad.mul(w, w)), [w, b])
    assert np.array_equal(gb, np.zeros(2))
    assert np.array_equal(gw, 2 * np.ones(3))


def test_reused_node_accumulates():
    x = ad.Var(np.array(2.0))
    y = x * x * x
    (g,) = ad.grad(y, [x])
    assert g == pytest.approx(12.0)


def test_non_finite_loss_names_term():
    x = ad.Var(np.array([0.0]))
    loss = ad.sum_(ad.log(x))
    loss.name = "L0"
    with pytest.raises(NumericError) as info:
        ad.grad(loss, [x])
    assert info.value.term == "L0"


def test_non_scalar_loss_rejected():
    x = ad.Var(np.ones(3))
    with pytest.raises(ShapeError):
        ad.grad(x * 2, [x])


def test_matmul_rejects_non_matrices():
    with pytest.raises(ShapeError):
        ad.matmul(ad.Var(np.ones(3)), np.ones((3, 3)))


def test_plain_arrays_bypass_tape():
    out = ad.tanh(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)


def test_softplus_is_stable_for_large_inputs():
    v = ad.softplus(np.array([-800.0, 0.0, 800.0]))
    assert np.allclose(v, [0.0, np.log(2.0), 800.0])


# --- forward mode -----------------------------------------------------------

def test_jvp_linear_map_is_matrix_product(rng):
    w = rng.normal(size=(3, 2))
    x, v = rng.normal(size=2), rng.normal(size=2)
    assert np.allclose(ad.jvp(w, x, v), w @ v)


def test_jvp_identity():
    assert np.array_equal(ad.jvp(lambda d: d, np.array([0.3, -1.0]), np.array([0.0, 1.0])), [0.0, 1.0])


def test_jvp_dual_tanh_network_matches_finite_difference(rng):
    w1, w2 = rng.normal(size=(5, 3)), rng.normal(size=(2, 5))

    def net(d):
        return w2 @ (w1 @ d).tanh() if isinstance(d, ad.Dual) else w2 @ np.tanh(w1 @ d)

    x, v = rng.normal(size=3), rng.normal(size=3)
    h = 1e-5
    fd = (net(x + h * v) - net(x - h * v)) / (2 * h)
    assert np.max(np.abs(ad.jvp(net, x, v) - fd)) < 1e-6


def test_jvp_rejects_mismatched_direction():
    with pytest.raises(ShapeError):
        ad.jvp(np.eye(2), np.zeros(2), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, 3, elements=finite), v=arrays(np.float64, 3, elements=finite))
def test_jvp_matches_gradient_projection(x, v):
    a = np.array([0.5, -1.0, 2.0])

    def scalar(d):
        return (d * a).tanh() @ np.ones(3) if isinstance(d, ad.Dual) else np.tanh(d * a) @ np.ones(3)

    leaf = ad.Var(x)
    (g,) = ad.grad(ad.sum_(ad.tanh(ad.mul(leaf, a))), [leaf])
    assert abs(float(g @ v) - float(ad.jvp(scalar, x, v))) < 1e-8
