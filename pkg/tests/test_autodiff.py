import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gedaes.autodiff import (
    PRIMITIVES,
    ShapeError,
    Tape,
    check_primitive,
    grad_check,
    override_backward,
)


def test_matmul_shape():
    t = Tape()
    out = t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 1))))
    assert t.value(out).shape == (2, 1)


def test_matmul_shape_mismatch_names_primitive_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 1))))


@pytest.mark.parametrize(
    "kind, shapes",
    [("add", [(2, 3), (3, 2)]), ("mul", [(2, 3), (4,)]), ("concat", [(2, 3), (3, 3)])],
)
def test_shape_errors(kind, shapes):
    t = Tape()
    ids = [t.leaf(np.ones(s)) for s in shapes]
    with pytest.raises(ShapeError, match=kind):
        t.apply(kind, ids)


def test_sigmoid_of_zero():
    t = Tape()
    assert t.value(t.sigmoid(t.leaf(np.zeros((1, 1)))))[0, 0] == 0.5


def test_softmax_xent_uniform():
    t = Tape()
    loss = t.softmax_xent(t.leaf(np.zeros(3)), [1])
    assert t.value(loss)[0] == pytest.approx(math.log(3), abs=1e-12)


def test_softmax_xent_is_overflow_safe():
    t = Tape()
    loss = t.softmax_xent(t.leaf(np.array([[1000.0, 0.0, -1000.0]])), [0])
    assert t.value(loss)[0] == pytest.approx(0.0, abs=1e-12)
    grads = t.backward(loss)
    assert np.all(np.isfinite(grads[0]))


def test_squared_error_gradient():
    t = Tape()
    w = t.leaf(np.array([3.0]))
    grads = t.backward(t.squared_error(w, 0.0))
    assert grads[w][0] == 6.0


def test_sigmoid_gradient_at_zero():
    t = Tape()
    w = t.leaf(np.array([0.0]))
    grads = t.backward(t.sigmoid(w))
    assert grads[w][0] == 0.25


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.tanh(t.leaf(np.ones((2, 2))))
    with pytest.raises(ShapeError, match="scalar"):
        t.backward(x)


def test_unreached_leaf_gets_zero_gradient():
    t = Tape()
    a = t.leaf(np.ones((2, 2)))
    b = t.leaf(np.full((3,), 5.0))
    grads = t.backward(t.squared_error(a, 0.0))
    assert np.array_equal(grads[b], np.zeros(3))


def test_multiple_uses_accumulate():
    t = Tape()
    w = t.leaf(np.array([2.0]))
    # w*w + w  ->  d/dw = 2w + 1
    loss = t.add(t.mul(w, w), w)
    assert t.backward(loss)[w][0] == 5.0


def test_topological_order():
    t = Tape()
    a = t.leaf(np.ones((2, 2)))
    b = t.tanh(t.mul(a, a))
    t.backward(t.squared_error(b, 0.0))
    for node, ins in enumerate(t.inputs):
        assert all(i < node for i in ins)


def test_gradient_shapes_match_values():
    t = Tape()
    x = t.leaf(np.random.default_rng(0).normal(size=(4, 3)))
    w = t.leaf(np.ones((3, 2)))
    loss = t.softmax_xent(t.matmul(x, w), [0, 1, 1, 0])
    grads = t.backward(loss)
    for node, g in grads.items():
        assert g.shape == t.value(node).shape


@pytest.mark.parametrize("kind", sorted(PRIMITIVES))
def test_primitive_gradients_100_trials(kind):
    worst = max(check_primitive(kind, seed=s).max_error for s in range(100))
    assert worst <= 1e-4, f"{kind}: worst relative error {worst:.2e}"


def test_single_matmul_layer_grad_check():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(3, 4))
    report = grad_check(
        lambda t, p: t.squared_error(t.matmul(t.leaf(x), p["w"]), 0.0),
        {"w": rng.uniform(-1, 1, size=(4, 2))},
        tolerance=1e-4,
    )
    assert report.passed


def test_random_three_layer_composition():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(5, 4))
    params = {
        "w1": rng.uniform(-1, 1, size=(4, 6)),
        "b1": rng.uniform(-1, 1, size=(1, 6)),
        "w2": rng.uniform(-1, 1, size=(6, 3)),
        "w3": rng.uniform(-1, 1, size=(3, 1)),
    }

    def build(t, p):
        h1 = t.tanh(t.add(t.matmul(t.leaf(x), p["w1"]), p["b1"]))
        h2 = t.sigmoid(t.matmul(h1, p["w2"]))
        return t.squared_error(t.matmul(t.mean_time(h2), p["w3"]), 0.3)

    report = grad_check(build, params, tolerance=1e-4)
    assert report.passed, str(report)


def test_corrupted_tanh_gradient_is_caught():
    def wrong(g, vals, out, cache):
        return [g * (1.0 - out)]  # missing square

    with override_backward("tanh", wrong):
        report = check_primitive("tanh", seed=0)
    assert not report.passed
    assert report.name == "tanh"
    assert "tanh" in str(report) and "FAIL" in str(report)
    # restored afterwards
    assert check_primitive("tanh", seed=0).passed


def test_backward_is_linear():
    rng = np.random.default_rng(11)
    t = Tape()
    w = t.leaf(rng.uniform(-1, 1, size=(3, 3)))
    x = t.leaf(rng.uniform(-1, 1, size=(2, 3)))
    h = t.tanh(t.matmul(x, w))
    l1 = t.squared_error(h, 0.1)
    l2 = t.softmax_xent(h, [2, 0])
    a, b = 0.7, -1.3
    combo = t.add(t.scale_shift(l1, a), t.scale_shift(l2, b))
    g1, g2, g = t.backward(l1), t.backward(l2), t.backward(combo)
    assert np.allclose(g[w], a * g1[w] + b * g2[w], rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-5, 5, allow_nan=False),
    st.integers(1, 6),
    st.integers(1, 4),
)
def test_mean_of_constant_sequence_is_the_constant(c, n, d):
    t = Tape()
    out = t.mean_time(t.leaf(np.full((n, d), c)))
    # summing n copies rounds, so exact equality does not hold in float64
    assert np.all(np.abs(t.value(out) - c) <= n * math.ulp(c))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 2), elements=st.floats(-10, 10)),
    arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
)
def test_concat_preserves_element_order(a, b):
    t = Tape()
    out = t.value(t.concat(t.leaf(a), t.leaf(b)))
    for r in range(3):
        assert list(out[r]) == list(a[r]) + list(b[r])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
def test_primitives_stay_finite_on_bounded_inputs(x):
    t = Tape()
    a = t.leaf(x)
    for node in (t.sigmoid(a), t.tanh(a), t.softmax_xent(a, [0, 1, 2, 0])):
        assert np.all(np.isfinite(t.value(node)))
