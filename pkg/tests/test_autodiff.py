import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tumorseg import autodiff as ad
from tumorseg.autodiff import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- elementwise ---------------------------------------------------------------

def test_leaky_relu_slope():
    out = ad.leaky_relu(t64([-1.0, 0.0, 2.0]), 0.01)
    np.testing.assert_array_equal(out.data, [-0.01, 0.0, 2.0])


def test_sigmoid_at_zero():
    assert ad.sigmoid(t64([0.0])).data.tolist() == [0.5]


def test_add():
    assert ad.add(t64([1, 2]), t64([3, 4])).data.tolist() == [4, 6]


def test_elementwise_dispatch_matches_named_ops():
    a, b = t64([0.5, 1.5]), t64([2.0, 3.0])
    for kind, fn in [("add", ad.add), ("mul", ad.mul), ("sub", ad.sub)]:
        np.testing.assert_array_equal(ad.elementwise(kind, a, b).data, fn(a, b).data)
    for kind, fn in [("sigmoid", ad.sigmoid), ("log", ad.log), ("exp", ad.exp)]:
        np.testing.assert_array_equal(ad.elementwise(kind, a).data, fn(a).data)
    np.testing.assert_array_equal(ad.elementwise("leaky_relu", a, slope=0.2).data, ad.leaky_relu(a, 0.2).data)
    with pytest.raises(ValueError):
        ad.elementwise("tanh", a)


def test_broadcast_error_names_both_shapes():
    with pytest.raises(ad.BroadcastError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(t64(np.ones((2, 3))), t64(np.ones(4)))


def test_broadcast_shape_and_gradient_shape():
    a = t64(np.ones((2, 1, 3)), grad=True)
    b = t64(np.arange(4.0).reshape(4, 1), grad=True)
    y = a * b
    assert y.shape == (2, 4, 3)
    y.sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_array_equal(a.grad, np.full((2, 1, 3), 6.0))
    np.testing.assert_array_equal(b.grad, np.full((4, 1), 6.0))


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(t64([-800.0, 800.0]))
    assert np.all(np.isfinite(y.data))
    np.testing.assert_array_equal(y.data, [0.0, 1.0])


# -- matmul / reduce -----------------------------------------------------------

def test_matmul_identity():
    v = t64(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_array_equal(ad.matmul(t64(np.eye(3)), v).data, v.data)


def test_matmul_small():
    out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    assert out.data.tolist() == [[3], [7]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 6))
    ref = np.zeros((4, 6))
    for i in range(4):
        for j in range(6):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(t64(a), t64(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_matmul_batched_broadcast_gradients():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((3, 2, 4)), grad=True)
    b = t64(rng.standard_normal((4, 5)), grad=True)
    ad.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data.sum(1), (3, 2, 4)), atol=1e-12)
    np.testing.assert_allclose(b.grad, np.repeat(a.data.sum((0, 1))[:, None], 5, 1), atol=1e-12)


def test_reduce_sum():
    assert ad.sum(t64([1, 2, 3])).item() == 6


def test_mean_over_unit_axis_is_identity():
    x = t64(np.arange(6.0).reshape(2, 1, 3))
    np.testing.assert_array_equal(ad.mean(x, axes=1).data, x.data.reshape(2, 3))


def test_mean_flat_loop_oracle():
    v = np.random.default_rng(2).uniform(0, 1, 16)
    acc = 0.0
    for x in v:
        acc += x
    assert abs(ad.mean(t64(v)).item() - acc / 16) < 1e-12


@pytest.mark.parametrize("axes", [(0, 0), (3,), (-4,)])
def test_reduce_rejects_bad_axes(axes):
    with pytest.raises(ValueError):
        ad.sum(t64(np.ones((2, 2, 2))), axes=axes)


def test_reduce_keepdims():
    y = ad.sum(t64(np.ones((2, 3, 4))), axes=(0, 2), keepdims=True)
    assert y.shape == (1, 3, 1) and y.data.ravel().tolist() == [8, 8, 8]


# -- backward ------------------------------------------------------------------

def test_square_gradient():
    x = t64([3.0], grad=True)
    (x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_sigmoid_gradient_at_zero():
    x = t64([0.0], grad=True)
    ad.sigmoid(x).backward()
    assert x.grad.tolist() == [0.25]


def test_backward_seed_shape_mismatch():
    x = t64([1.0, 2.0], grad=True)
    rec = ad.record(x * x)
    with pytest.raises(ValueError, match="seed"):
        ad.backward(rec, np.ones(3))


def test_untracked_leaves_get_no_entry():
    x = t64([1.0, 2.0], grad=True)
    c = t64([5.0, 7.0])
    y = x * c
    rec = ad.record(y)
    grads = ad.backward(rec, np.ones(2), keep="all")
    assert x.node.id in grads
    assert c.node is None
    np.testing.assert_array_equal(grads[x.node.id].data, [5.0, 7.0])


def test_untracked_tensor_never_acquires_node():
    c = t64([1.0])
    y = c * c + c
    assert c.node is None and y.node is None and not y.requires_grad


def test_record_is_topologically_ordered():
    x = t64([1.0, 2.0], grad=True)
    y = ad.sigmoid(x * x + x).sum()
    rec = ad.record(y)
    pos = {n.id: i for i, n in enumerate(rec.nodes)}
    for n in rec.nodes:
        for p in n.inputs:
            if isinstance(p, ad.Node):
                assert pos[p.id] < pos[n.id]


def test_replay_is_bit_identical_in_64_bit():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((3, 4)), grad=True)
    w = t64(rng.standard_normal((4, 2)), grad=True)
    y = ad.softmax(ad.leaky_relu(ad.matmul(x, w)), axis=-1)
    z = ad.log(ad.sigmoid(y) + 1.0).mean()
    rec = ad.record(z)
    values = ad.replay(rec)
    for n in rec.nodes:
        assert np.array_equal(values[n.id], n.value)


def test_shared_subexpression_accumulates():
    x = t64([2.0], grad=True)
    y = x * x
    (y + y * x).backward()  # 2x^2 ... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad.tolist() == [16.0]


def test_tensor_invariants():
    t = Tensor(np.float64(3.0))
    assert t.shape == (1,) and t.ndim == 1
    assert t.data.size == int(np.prod(t.shape))
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with ad.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 2)))


# -- finite differences -----------------------------------------------------------

def test_fd_sum_is_exact_on_dyadic_points():
    pts = np.array([0.5, -1.25, 3.0, 8.0, -0.375])
    assert ad.finite_difference_check(lambda t: t.sum(), pts, 2.0 ** -17) == 0.0


def test_fd_sum_on_random_points_is_roundoff_only():
    pts = np.random.default_rng(0).standard_normal(5)
    assert ad.finite_difference_check(lambda t: t.sum(), pts) < 1e-10


def test_fd_square():
    assert ad.finite_difference_check(lambda t: (t * t).sum(), np.array([1.0, 2.0]), 1e-5) < 1e-8


def test_fd_leaky_relu_away_from_kink():
    pts = np.array([-2.0, -0.5, 0.3, 1.7])
    assert ad.finite_difference_check(lambda t: ad.leaky_relu(t).sum(), pts, 1e-5) < 1e-8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_reports_non_finite_coordinate():
    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        ad.finite_difference_check(lambda t: ad.log(t).sum(), np.array([1.0, 1e-7]), 1e-5)


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda t: t.sum(), np.ones(2), 0.0)


def _magnitudes(draw_data):
    """Values with |v| in [0.1, 3]: away from the lReLU kink and from vanishing gradients."""
    mag = draw_data.draw(hnp.arrays(np.float64, (3, 4), elements=st.floats(0.1, 3.0)))
    sign = draw_data.draw(hnp.arrays(np.bool_, (3, 4)))
    return np.where(sign, mag, -mag)


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "sigmoid": lambda a, b: ad.sigmoid(a) * b,
    "leaky_relu": lambda a, b: ad.leaky_relu(a) * b,
    "log": lambda a, b: ad.log(a * a + 0.5) * b,
    "exp": lambda a, b: ad.exp(a * 0.5) * b,
    "matmul": lambda a, b: ad.matmul(a, ad.permute(b, (1, 0))),
    "softmax": lambda a, b: ad.softmax(a, -1) * b,
    "reshape": lambda a, b: ad.reshape(a, (a.size,)) * ad.reshape(b, (b.size,)),
    "concat": lambda a, b: ad.concat([a, b * b], axis=0),
    "bce": lambda a, b: ad.bce_with_logits(a, Tensor((b.data > 0).astype(np.float64))),
    "mean": lambda a, b: ad.mean(a * b, axes=1),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=15, deadline=None)
@given(data=st.data())
def test_chain_rule_every_op(name, data):
    a = _magnitudes(data)
    b = _magnitudes(data)
    proj = np.random.default_rng(0).standard_normal(64)

    def f(t):
        out = OPS[name](t, Tensor(b))
        return (out * Tensor(proj[: out.size].reshape(out.shape))).sum()

    assert ad.finite_difference_check(f, a, 1e-5) < 1e-6


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-10, 10, allow_nan=False)))
def test_gradient_shape_equals_leaf_shape(x):
    t = t64(x, grad=True)
    (ad.sigmoid(t) * 2.0).mean().backward()
    assert t.grad.shape == x.shape


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x = t64(rng.standard_normal((5, 6)), grad=True)
        w = t64(rng.standard_normal((6, 3)), grad=True)
        ad.softmax(ad.matmul(x, w), -1).sum().backward()
        return x.grad.copy(), w.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
