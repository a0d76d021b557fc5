import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metasl import autodiff as ad
from metasl.autodiff import (
    Graph, GraphError, OptimizerState, ShapeError, Tensor,
    apply_update, grad_check, op_forward,
)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([1.0, 1.0, 1.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_tanh_zero():
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    g = Graph()
    with g:
        loss = ad.tsum(ad.mul(x, x))
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [6.0], atol=1e-14)


def test_backward_softmax_sum_is_constant():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    g = Graph()
    with g:
        loss = ad.tsum(ad.softmax(z, axis=1))
    g.backward(loss)
    np.testing.assert_allclose(z.grad, np.zeros((2, 5)), atol=1e-14)


def test_backward_three_layer_tanh_network_matches_finite_differences():
    rng = np.random.default_rng(1)
    ws = [Tensor(rng.normal(0, 0.5, (4, 4)), requires_grad=True) for _ in range(3)]
    x0 = Tensor(rng.normal(size=(2, 4)))

    for k, w in enumerate(ws):
        def f(wt, k=k):
            h = x0
            for j, wj in enumerate(ws):
                h = ad.tanh(ad.matmul(h, wt if j == k else wj))
            return ad.tsum(h)
        assert grad_check(f, w, 1e-5) < 1e-4


def test_grad_check_quadratic_is_nearly_exact():
    x = Tensor(np.array([1.5, -2.0, 0.25]))
    err = grad_check(lambda t: ad.tsum(ad.mul(t, t)), x, 1e-4)
    assert err < 1e-9


def test_grad_check_tanh_layer():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(0, 0.7, (3, 4)))
    x = Tensor(rng.normal(size=(2, 3)))
    err = grad_check(lambda t: ad.tsum(ad.tanh(ad.matmul(t, w))), x, 1e-5)
    assert err < 1e-4


def test_grad_check_rejects_bad_step_and_nonscalar():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda t: ad.tsum(t), x, 0.0)
    with pytest.raises(ShapeError):
        grad_check(lambda t: ad.mul(t, t), Tensor([1.0, 2.0]), 1e-5)


def test_sgd_update_arithmetic():
    p = Tensor([1.0], requires_grad=True)
    apply_update([p], [np.array([0.9])], OptimizerState.sgd(0.1))
    np.testing.assert_allclose(p.data, [0.91], atol=1e-15)


def test_zero_gradient_update():
    p = Tensor([2.0, -1.0], requires_grad=True)
    before = p.data.copy()
    apply_update([p], [np.zeros(2)], OptimizerState.sgd(0.5))
    np.testing.assert_array_equal(p.data, before)

    adam = OptimizerState.adam(0.5)
    apply_update([p], [np.zeros(2)], adam)
    np.testing.assert_array_equal(p.data, before)
    assert adam.step_count == 1


def test_adam_first_step_is_signed_lr():
    # With bias correction, step 1 moves each coordinate by lr * sign(g)
    # up to the eps term.
    g = np.array([0.3, -2.0, 1e-3])
    p = Tensor(np.zeros(3), requires_grad=True)
    apply_update([p], [g], OptimizerState.adam(0.01))
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_apply_update_rejects_misalignment():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        apply_update([p], [np.zeros(2)], OptimizerState.sgd(0.1))
    with pytest.raises(ValueError):
        apply_update([p], [], OptimizerState.sgd(0.1))


def test_adam_state_tracks_parameter_shapes():
    ps = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
    state = OptimizerState.adam(1e-3)
    apply_update(ps, [np.ones((2, 3)), np.ones(4)], state)
    assert [m.shape for m in state.m] == [(2, 3), (4,)]
    apply_update(ps, [np.ones((2, 3)), np.ones(4)], state)
    assert state.step_count == 2


# ---------------------------------------------------------------------------
# Primitive-by-primitive gradient checks on randomized small inputs
# ---------------------------------------------------------------------------

def _op_cases(rng):
    b = Tensor(rng.normal(size=(3, 4)))
    m2 = Tensor(rng.normal(size=(4, 2)))
    r9 = Tensor(rng.normal(size=(9, 4)))
    return {
        "add": lambda t: ad.tsum(ad.tanh(ad.add(t, b))),
        "sub": lambda t: ad.tsum(ad.tanh(ad.sub(t, b))),
        "mul": lambda t: ad.tsum(ad.tanh(ad.mul(t, b))),
        "scale": lambda t: ad.tsum(ad.tanh(ad.scale(t, 1.7))),
        "matmul": lambda t: ad.tsum(ad.tanh(ad.matmul(t, m2))),
        "tanh": lambda t: ad.tsum(ad.tanh(t)),
        "sigmoid": lambda t: ad.tsum(ad.sigmoid(t)),
        "relu": lambda t: ad.tsum(ad.relu(ad.add(t, Tensor(np.full((3, 4), 0.05))))),
        "log": lambda t: ad.tsum(ad.log(ad.add(ad.sigmoid(t), Tensor(np.full((3, 4), 0.5))))),
        "softmax": lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), Tensor(b))),
        "log_softmax": lambda t: ad.tsum(ad.mul(ad.log_softmax(t, axis=1), Tensor(b))),
        "concat": lambda t: ad.tsum(ad.tanh(ad.concat([t, Tensor(b)], axis=1))),
        "slice": lambda t: ad.tsum(ad.tanh(ad.narrow(t, 1, 1, 2))),
        "reshape": lambda t: ad.tsum(ad.tanh(ad.reshape(t, (4, 3)))),
        "transpose": lambda t: ad.tsum(ad.tanh(ad.transpose(t))),
        "tile": lambda t: ad.tsum(ad.tanh(ad.mul(ad.tile_rows(t, 3), r9))),
        "sum": lambda t: ad.tsum(ad.tanh(ad.tsum(t, axis=0))),
        "mean": lambda t: ad.tmean(ad.tanh(t)),
        "gather": lambda t: ad.tsum(ad.tanh(ad.gather_rows(t, np.array([0, 2, 1, 2])))),
        "pick": lambda t: ad.tsum(ad.pick(ad.log_softmax(t, axis=1), np.array([0, 3, 1]))),
    }


@pytest.mark.parametrize("kind", sorted(_op_cases(np.random.default_rng(0)).keys()))
def test_primitive_gradients_over_100_seeds(kind):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        f = _op_cases(rng)[kind]
        point = Tensor(rng.normal(size=(3, 4)))
        worst = max(worst, grad_check(f, point, 1e-5))
    assert worst < 1e-4, f"{kind}: {worst}"


def test_bias_broadcast_add_gradient():
    rng = np.random.default_rng(3)
    bias = Tensor(rng.normal(size=4))
    base = Tensor(rng.normal(size=(3, 4)))
    err = grad_check(lambda t: ad.tsum(ad.tanh(ad.add(base, t))), bias, 1e-5)
    assert err < 1e-4


def test_column_broadcast_mul_gradient():
    rng = np.random.default_rng(4)
    col = Tensor(rng.normal(size=(3, 1)))
    other = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: ad.tsum(ad.mul(other, t)), col, 1e-5) < 1e-4
    assert grad_check(lambda t: ad.tsum(ad.mul(t, col)), other, 1e-5) < 1e-4


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 5, size=(4, 6))
    out = ad.softmax(Tensor(z), axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 3))
    x = rng.normal(size=(2, 3))

    def grad_of(fn):
        t = Tensor(w.copy(), requires_grad=True)
        g = Graph()
        with g:
            loss = fn(t)
        g.backward(loss)
        return t.grad.copy()

    f = lambda t: ad.tsum(ad.tanh(ad.matmul(Tensor(x), t)))
    h = lambda t: ad.tmean(ad.mul(t, t))
    combined = lambda t: ad.add(ad.scale(f(t), a), ad.scale(h(t), b))
    lhs = grad_of(combined)
    rhs = a * grad_of(f) + b * grad_of(h)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        g = Graph()
        with g:
            h = ad.tanh(ad.matmul(x, Tensor(rng.normal(size=(4, 4)))))
            loss = ad.tmean(ad.mul(h, h))
        g.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# Error handling and graph structure
# ---------------------------------------------------------------------------

def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError, match="narrow|slice"):
        ad.narrow(Tensor(np.zeros((2, 3))), 1, 2, 5)


def test_op_forward_dispatch():
    out = op_forward("softmax", [Tensor([0.0, 0.0])], axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5])
    with pytest.raises(KeyError):
        op_forward("convolution", [Tensor([0.0])])


def test_backward_before_forward_rejected():
    g = Graph()
    loss = Tensor([1.0])
    with pytest.raises(GraphError):
        g.backward(loss)


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    g = Graph()
    with g:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        g.backward(y)


def test_cross_graph_tensor_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    g1 = Graph()
    with g1:
        y = ad.mul(x, x)
    g2 = Graph()
    with g2:
        with pytest.raises(GraphError):
            ad.tsum(y)


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        Tensor([np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(Tensor([0.0]))


def test_gather_and_pick_validate_ids():
    with pytest.raises(ValueError):
        ad.gather_rows(Tensor(np.zeros((3, 2))), np.array([3]))
    with pytest.raises(ValueError):
        ad.pick(Tensor(np.zeros((2, 3))), np.array([0, 5]))


def test_graph_nodes_are_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    g = Graph()
    with g:
        h = ad.tanh(ad.matmul(x, x))
        loss = ad.tsum(ad.mul(h, h))
    g.backward(loss)
    for k, node in enumerate(g.nodes):
        for i in node.in_ids:
            assert i < k
    assert x.grad is not None and np.all(np.isfinite(x.grad))
    # intermediate grads were discarded
    assert h.grad is None


def test_ops_outside_graph_do_not_record():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.mul(x, x)
    assert y.tape is None


def test_finiteness_guard_flag():
    old = ad.CHECK_FINITE
    ad.CHECK_FINITE = True
    try:
        big = Tensor(np.full(3, 1e308))
        with pytest.raises(FloatingPointError):
            ad.add(big, big)
    finally:
        ad.CHECK_FINITE = old
