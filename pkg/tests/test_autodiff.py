import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graybox import autodiff as ad


def away_from_zero(rng, shape, gap=0.05):
    # keep relu kinks and norm singularities well outside the h=1e-5 probe
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _weighted(node, rng):
    w = rng.normal(size=node.shape)
    return ad.sum_(node * ad.const(w)) if node.shape else node


# one builder per operation kind; each returns (graph, bindings)
def g_add(rng):
    return (lambda a, b: a + b * 2.0), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}

def g_sub(rng):
    return (lambda a, b: a - b), {"a": rng.normal(size=(5,)), "b": rng.normal(size=(5,))}

def g_mul(rng):
    return (lambda a, b: a * b * a), {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}

def g_relu(rng):
    return (lambda a: ad.relu(a) * a), {"a": away_from_zero(rng, (4, 3))}

def g_sigmoid(rng):
    return (lambda a: ad.sigmoid(a * 3.0)), {"a": rng.normal(size=(6,))}

def g_tanh(rng):
    return (lambda a: ad.tanh(a)), {"a": rng.normal(size=(2, 5))}

def g_softmax(rng):
    return (lambda a: ad.softmax(a, axis=-1)), {"a": rng.normal(size=(3, 4))}

def g_bce(rng):
    y = (rng.random((4, 2)) > 0.5).astype(float)
    return (lambda a: ad.bce_with_logits(a, y)), {"a": rng.normal(size=(4, 2)) * 2}

def g_sum(rng):
    return (lambda a: ad.sum_(a * a, axis=1)), {"a": rng.normal(size=(3, 4, 2))}

def g_mean(rng):
    return (lambda a: ad.mean(a, axis=(0, 2))), {"a": rng.normal(size=(3, 4, 2))}

def g_l2norm(rng):
    return (lambda a: ad.l2norm(a, axis=-1)), {"a": rng.normal(size=(3, 5))}

def g_matmul(rng):
    return (lambda a, b: a @ b), {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}

def g_matmul_batched(rng):
    return (lambda a, b: a @ b), {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 2))}

def g_conv(rng):
    return ((lambda x, w: ad.conv2d(x, w, stride=2, pad=1)),
            {"x": rng.normal(size=(2, 5, 5, 2)), "w": rng.normal(size=(3, 3, 2, 3))})

def g_reshape(rng):
    return (lambda a: ad.reshape(a, (6, 2)) * 1.5), {"a": rng.normal(size=(3, 4))}

def g_transpose(rng):
    return (lambda a: ad.transpose(a, (2, 0, 1))), {"a": rng.normal(size=(2, 3, 4))}

def g_broadcast(rng):
    return (lambda a: ad.broadcast_to(a, (4, 3, 5))), {"a": rng.normal(size=(3, 1))}

def g_concat(rng):
    return ((lambda a, b: ad.concat([a, b, a], axis=1)),
            {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 1))})

def g_slice(rng):
    return (lambda a: a[1:, ::2] * a[:-1, ::2]), {"a": rng.normal(size=(4, 6))}

def g_embedding(rng):
    idx = rng.integers(0, 5, size=(3, 4))
    return (lambda t: ad.embedding(t, idx)), {"t": rng.normal(size=(5, 2))}

def g_gather(rng):
    idx = rng.integers(0, 6, size=(2, 3))
    return (lambda x: ad.gather_rows(x, idx)), {"x": rng.normal(size=(2, 6, 4))}

def g_divide(rng):
    return (lambda a: a / 4.0 - 1.0), {"a": rng.normal(size=(3,))}

def g_mlp(rng):
    # a small composite: conv -> relu -> pool -> linear -> bce
    y = np.array([[1.0], [0.0]])
    def graph(x, w, v):
        h = ad.relu(ad.conv2d(x, w, stride=1, pad=1))
        pooled = ad.mean(h, axis=(1, 2))
        return ad.sum_(ad.bce_with_logits(pooled @ v, y))
    return graph, {"x": rng.random((2, 4, 4, 3)), "w": rng.normal(size=(3, 3, 3, 4)) * 0.5,
                   "v": rng.normal(size=(4, 1))}

BUILDERS = [g_add, g_sub, g_mul, g_relu, g_sigmoid, g_tanh, g_softmax, g_bce, g_sum, g_mean,
            g_l2norm, g_matmul, g_matmul_batched, g_conv, g_reshape, g_transpose, g_broadcast,
            g_concat, g_slice, g_embedding, g_gather, g_divide, g_mlp]


def random_graphs(n=50):
    for i in range(n):
        rng = np.random.default_rng(1000 + i)
        graph, bindings = BUILDERS[i % len(BUILDERS)](rng)
        w_rng = np.random.default_rng(5000 + i)
        weights = {}

        def scalar(g=graph, r=w_rng, cache=weights, **kw):
            out = g(**kw)
            if out.shape == ():
                return out
            if "w" not in cache:
                cache["w"] = r.normal(size=out.shape)
            return ad.sum_(out * ad.const(cache["w"]))

        yield BUILDERS[i % len(BUILDERS)].__name__, scalar, bindings


def test_fifty_random_graphs_match_central_differences():
    start = time.perf_counter()
    graphs = list(random_graphs(50))
    assert {name for name, _, _ in graphs} == {b.__name__ for b in BUILDERS}
    for name, graph, bindings in graphs:
        for target in bindings:
            err = ad.finite_diff_check(graph, bindings, target, h=1e-5)
            assert err < 1e-4, (name, target, err)
    assert time.perf_counter() - start < 60


def test_matmul_forward_and_backward_match_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    av, bv = ad.var("a", a), ad.var("b", b)
    out = av @ bv
    np.testing.assert_allclose(out.value, ref, rtol=1e-12)
    ga, gb = ad.backprop(ad.sum_(out), [av, bv])
    # d/da_ik sum_ij a_ik b_kj = sum_j b_kj
    np.testing.assert_allclose(ga, np.tile(b.sum(axis=1), (3, 1)))
    np.testing.assert_allclose(gb, np.tile(a.sum(axis=0)[:, None], (1, 2)))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 2, 4))
    out = ad.conv2d(ad.const(x), ad.const(w), stride=2, pad=1).value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_shared_subexpression_gradient_accumulates():
    x = ad.var("x", 3.0)
    y = x * x
    z = y + y * x  # x^2 + x^3
    (g,) = ad.backprop(z, [x])
    assert g == pytest.approx(2 * 3.0 + 3 * 9.0)


def test_sigmoid_and_bce_are_stable_for_large_logits():
    z = ad.var("z", np.array([-800.0, 0.0, 800.0]))
    s = ad.sigmoid(z).value
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
    loss = ad.bce_with_logits(z, np.array([1.0, 1.0, 1.0]))
    assert np.all(np.isfinite(loss.value))
    assert loss.value[0] == pytest.approx(800.0)


def test_l2norm_subgradient_at_zero_is_zero():
    x = ad.var("x", np.zeros((2, 3)))
    (g,) = ad.backprop(ad.sum_(ad.l2norm(x, axis=1)), [x])
    assert np.all(g == 0.0)


def test_non_broadcastable_shapes_name_the_operation():
    with pytest.raises(ad.ShapeError) as err:
        ad.add(ad.const(np.ones((2, 3))), ad.const(np.ones((3, 2))))
    assert err.value.op == "add"
    with pytest.raises(ad.ShapeError) as err:
        ad.const(np.ones((2, 3))) @ ad.const(np.ones((2, 3)))
    assert err.value.op == "matmul"


def test_non_scalar_root_and_unbound_name_are_errors():
    root = ad.evaluate(lambda a: a * 2.0, {"a": np.ones(3)})
    with pytest.raises(ad.GraphError):
        ad.gradient(root, "a")
    root = ad.evaluate(lambda a: ad.sum_(a), {"a": np.ones(3)})
    with pytest.raises(ad.GraphError) as err:
        ad.gradient(root, "b")
    assert "unbound" in str(err.value)
    with pytest.raises(ad.GraphError):
        ad.evaluate(lambda a: ad.sum_(a), {"b": np.ones(3)})


def test_non_finite_values_raise():
    with pytest.raises(ad.NonFiniteError):
        ad.var("a", np.ones(2)) * np.inf


def test_backward_visits_each_node_once_on_a_deep_chain():
    x = ad.var("x", 1.0)
    y = x
    for _ in range(3000):
        y = y * 1.0 + 0.0
    (g,) = ad.backprop(y, [x])
    assert g == 1.0


def test_constants_receive_zero_gradient():
    a, c = ad.var("a", np.ones(3)), ad.const(np.full(3, 2.0))
    ga, gc = ad.backprop(ad.sum_(a * c), [a, c])
    np.testing.assert_allclose(ga, 2.0)
    assert np.all(gc == 0.0)


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda a: ad.sum_(a), {"a": np.ones(2)}, "a", h=0.0)


small = st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(small, small)
def test_elementwise_gradients_property(xs, ys):
    n = min(len(xs), len(ys))
    a, b = np.array(xs[:n]), np.array(ys[:n])
    graph = lambda a, b: ad.sum_(ad.tanh(a) * b + ad.sigmoid(a - b))
    for t in ("a", "b"):
        assert ad.finite_diff_check(graph, {"a": a, "b": b}, t) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(m, n))
    graph = lambda a, b: ad.sum_((a @ b) * ad.const(w))
    bind = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n))}
    # analytic oracle: d/dA sum(W * AB) = W B^T
    np.testing.assert_allclose(ad.gradient(ad.evaluate(graph, bind), "a"), w @ bind["b"].T)
    assert ad.finite_diff_check(graph, bind, "b") < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(xs):
    s = ad.softmax(ad.const(np.array(xs)[None, :])).value
    assert s.sum() == pytest.approx(1.0)
    assert np.all(s >= 0)
