import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdf import tensor as T
from qdf.gradcheck import check_gradients, nudge_from_kinks, relative_error
from qdf.nn import Adam, AdamState, Linear, adam_step, glorot_uniform, lr_schedule
from qdf.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_forward_definitions():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    rows = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(T.segment_sum(rows, np.array([0, 0, 1]), 2).data,
                                  [[4, 6], [5, 6]])
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_simple_gradients():
    w = leaf([1.0, 2.0])
    T.sum(T.square(w)).backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])
    v = leaf([1.0, 2.0])
    loss = T.add(T.sum(T.mul(v, 0.0)), Tensor(3.0))
    loss.backward()
    np.testing.assert_array_equal(v.grad, [0.0, 0.0])


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        T.square(leaf([1.0, 2.0])).backward()


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(leaf(np.ones(3)), leaf(np.ones(4)))
    with pytest.raises(ShapeError):
        T.segment_sum(leaf(np.ones((3, 2))), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        T.segment_sum(leaf(np.ones((3, 2))), np.array([1, 0, 0]), 2)


def test_no_grad_records_nothing():
    w = leaf([1.0, 2.0])
    with T.no_grad():
        out = T.sum(T.square(w))
    assert not out.requires_grad
    assert out.is_leaf
    assert T.is_grad_enabled()


def test_shared_node_accumulates():
    w = leaf([3.0])
    y = T.mul(w, w)
    T.sum(T.add(y, y)).backward()
    np.testing.assert_allclose(w.grad, [12.0])


def test_composite_graph_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = Tensor(nudge_from_kinks(rng.standard_normal((6, 4))), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    s = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    seg = np.array([0, 0, 1, 1, 1, 1])
    idx = np.array([1, 0, 1, 1, 0, 0])

    def build():
        h = T.affine(x, w, b)
        h = T.mul(h, T.take(s, idx))
        h = T.concat([T.exp(T.mul(h, 0.1)), T.sqrt(T.add(T.square(h), 1.0))], axis=1)
        pooled = T.segment_sum(h, seg, 2)
        scale = T.concat([s, T.add(s, s)], axis=1)
        return T.add(T.mean(T.square(pooled)), T.sum(T.div(T.sub(pooled, 1.0), scale)))

    report = check_gradients(build, {"x": [x], "w": [w], "b": [b], "s": [s]}, tolerance=1e-6)
    assert report.passed, report.format()


def test_linear_layer_gradients():
    rng = np.random.default_rng(1)
    layer = Linear(5, 3, rng, "lin")
    x = Tensor(rng.standard_normal((7, 5)), requires_grad=True)

    def build():
        return T.sum(T.square(T.relu(layer(x))))

    x.data[:] = nudge_from_kinks(x.data)
    report = check_gradients(build, {"weight": [layer.weight], "bias": [layer.bias], "x": [x]},
                             tolerance=1e-6)
    assert report.passed, report.format()


def test_nudge_from_kinks():
    out = nudge_from_kinks(np.array([0.0, -1e-5, 2e-4, 0.5]))
    np.testing.assert_array_equal(out, [1e-3, -1e-3, 1e-3, 0.5])


def test_relative_error():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


def test_gradcheck_reports_wrong_gradient():
    w = leaf([1.0, 2.0])

    def bad():
        # forward x^3, backward claims 2x
        return T.sum(Tensor.from_op(w.data ** 3, (w,), lambda g: (2 * w.data * g,)))

    report = check_gradients(bad, {"w": [w]}, tolerance=1e-6)
    assert not report.passed
    assert "FAIL" in report.format()


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), 200, 200)
    assert np.abs(w).max() <= np.sqrt(6 / 400)
    assert w.shape == (200, 200)


@pytest.mark.parametrize("epoch,expected", [(0, 1e-4), (199, 1e-4), (200, 5e-5), (399, 5e-5),
                                            (400, 2.5e-5)])
def test_lr_schedule(epoch, expected):
    assert lr_schedule(epoch, 1e-4, 0.5, 200) == pytest.approx(expected, rel=1e-15)


def test_lr_schedule_rejects_bad_step():
    with pytest.raises(ValueError):
        lr_schedule(3, 1e-3, 0.5, 0)


def test_adam_first_step():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.01)
    # m_hat = 1, v_hat = 1 at t=1
    assert p["w"][0] == pytest.approx(2.0 - 0.01 / (1.0 + 1e-8), rel=1e-15)


def test_adam_recurrence_against_reference():
    rng = np.random.default_rng(5)
    grads = rng.standard_normal((20, 3))
    p = {"w": np.zeros(3)}
    st_ = AdamState()
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(p, {"w": g}, st_, lr=0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-13)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.5, -2.0])}
    st_ = AdamState()
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_adam_identical_streams(seed):
    grads = np.random.default_rng(seed).standard_normal((15, 4))
    a, b = leaf(np.ones(4)), leaf(np.ones(4))
    oa, ob = Adam({"w": a}), Adam({"w": b})
    for g in grads:
        a.grad, b.grad = g.copy(), g.copy()
        oa.step(1e-2)
        ob.step(1e-2)
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_zero_grad_clears():
    a = leaf(np.ones(2))
    a.grad = np.ones(2)
    opt = Adam({"a": a})
    opt.zero_grad()
    assert a.grad is None
