import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decaylab import tensor as T
from decaylab.tensor import ShapeError, Tape, Tensor, backward
from decaylab.verify import finite_difference, grad_check


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_projector_row():
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = T.matmul(Tensor(p), Tensor(b))
    assert np.array_equal(out.data, np.array([[5.0, 6.0], [0.0, 0.0]]))


def test_matmul_dot_product():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "(2, 3)" in msg and "(4, 5)" in msg


def test_matmul_associativity():
    rng = np.random.Generator(np.random.Philox(11))
    a, b, c = (rng.normal(size=(4, 4)) for _ in range(3))
    left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
    assert np.max(np.abs(left - right)) <= 1e-10


def test_sigmoid_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert abs(T.sigmoid(Tensor(40.0)).item() - 1.0) <= 1e-15
    assert abs(T.sigmoid(Tensor(4.5951)).item() - 0.99) < 1e-4
    # exact at the argsigmoid point
    assert abs(T.sigmoid(Tensor(np.log(99.0))).item() - 0.99) <= 1e-15


def test_sigmoid_stable_on_tails():
    lo = T.sigmoid(Tensor(-750.0)).item()
    hi = T.sigmoid(Tensor(750.0)).item()
    assert 0.0 <= lo < 1e-300
    assert hi == 1.0


def test_silu_values():
    assert T.silu(Tensor(0.0)).item() == 0.0
    assert abs(T.silu(Tensor(1.0)).item() - 0.7311) < 1e-4
    assert abs(T.silu(Tensor(-1.0)).item() - (-0.2689)) < 1e-4
    assert abs(T.silu(Tensor(1.0)).item() + T.silu(Tensor(-1.0)).item() - 0.4622) < 1e-4
    assert abs(T.silu(Tensor(-40.0)).item()) <= 1e-15


def test_logsumexp_symmetric_zeros():
    assert abs(T.logsumexp(Tensor([0.0, 0.0])).item() - np.log(2.0)) <= 1e-15


def test_logsumexp_singleton():
    assert T.logsumexp(Tensor([3.7])).item() == 3.7


def test_logsumexp_stability():
    out = T.logsumexp(Tensor([1000.0, 1000.0])).item()
    assert np.isfinite(out)
    assert abs(out - (1000.0 + np.log(2.0))) <= 1e-12


def test_logsumexp_empty_axis():
    with pytest.raises(ValueError):
        T.logsumexp(Tensor(np.zeros((3, 0))), axis=-1)
    out = T.logsumexp(Tensor(np.zeros((3, 0))), axis=-1, allow_empty=True)
    assert out.shape == (3,)
    assert np.all(out.data == -np.inf)


def test_logsumexp_matches_naive_oracle():
    rng = np.random.Generator(np.random.Philox(12))
    x = rng.uniform(-20.0, 20.0, size=(5, 7))
    out = T.logsumexp(Tensor(x), axis=-1).data
    ref = np.log(np.sum(np.exp(x), axis=-1))
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_rmsnorm_zero_input():
    out = T.rmsnorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(4)), eps=1e-6)
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_rmsnorm_hand_value():
    out = T.rmsnorm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), eps=0.0)
    # rms = sqrt((9 + 16) / 2) = sqrt(12.5)
    ref = np.array([3.0, 4.0]) / np.sqrt(12.5)
    assert np.max(np.abs(out.data - ref)) <= 1e-12
    assert abs(out.data[0] - 0.8485) < 1e-4
    assert abs(out.data[1] - 1.1314) < 1e-4


def test_rmsnorm_scale_invariance():
    rng = np.random.Generator(np.random.Philox(13))
    x = rng.normal(size=(3, 6))
    g = Tensor(np.ones(6))
    a = T.rmsnorm(Tensor(x), g, eps=0.0).data
    b = T.rmsnorm(Tensor(7.5 * x), g, eps=0.0).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_rmsnorm_unit_rms():
    rng = np.random.Generator(np.random.Philox(14))
    x = rng.normal(size=(4, 8)) + 0.1
    out = T.rmsnorm(Tensor(x), Tensor(np.ones(8)), eps=0.0).data
    rms = np.sqrt((out ** 2).mean(axis=-1))
    assert np.max(np.abs(rms - 1.0)) <= 1e-12


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    with Tape():
        backward(T.sigmoid(x))
    assert x.grad == 0.25


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape():
        y = x + 1.0
        with pytest.raises(ValueError):
            backward(y)


def test_backward_requires_tape():
    x = Tensor(1.0, requires_grad=True)
    with pytest.raises(RuntimeError):
        backward(x)


def test_composed_expression_matches_finite_differences():
    rng = np.random.Generator(np.random.Philox(15))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def build(leaves):
        h = T.silu(T.matmul(leaves["x"], leaves["w"]))
        return T.tsum(T.sigmoid(h) * h)

    assert grad_check(build, {"x": x, "w": w}, rel_tol=1e-4) == []


@pytest.mark.parametrize("op", [T.exp, T.log, T.sqrt, T.sigmoid, T.silu,
                                T.softplus])
def test_elementwise_op_gradients(op):
    rng = np.random.Generator(np.random.Philox(16))
    x = Tensor(rng.uniform(0.2, 2.0, size=(2, 5)), requires_grad=True)

    def build(leaves, _op=op):
        return T.tsum(_op(leaves["x"]) * 1.5)

    assert grad_check(build, {"x": x}, rel_tol=1e-4) == []


def test_reduction_and_shape_op_gradients():
    rng = np.random.Generator(np.random.Philox(17))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def build(leaves):
        a = T.reshape(leaves["x"], (4, 3))
        b = T.transpose(a, (1, 0))
        c = T.concat([b, leaves["y"]], axis=-1)
        d = T.logsumexp(c, axis=-1)
        return T.tmean(d * d)

    assert grad_check(build, {"x": x, "y": y}, rel_tol=1e-4) == []


def test_take_gradient_scatter_adds():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    idx = np.array([0, 0, 2])
    with Tape():
        backward(T.tsum(x[idx]))
    assert np.array_equal(x.grad, np.array([2.0, 0.0, 1.0]))


def test_broadcast_add_gradient_unbroadcasts():
    a = Tensor(np.zeros((3, 4)), requires_grad=True)
    b = Tensor(np.zeros((1, 4)), requires_grad=True)
    with Tape():
        backward(T.tsum(a + b))
    assert np.array_equal(a.grad, np.ones((3, 4)))
    assert np.array_equal(b.grad, np.full((1, 4), 3.0))


def test_gradient_accumulation_is_deterministic():
    rng = np.random.Generator(np.random.Philox(18))
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def run():
        with Tape():
            y = T.matmul(x, x)
            backward(T.tsum(y * T.sigmoid(y)))
        g = x.grad.copy()
        x.grad = None
        return g

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-20.0, max_value=20.0),
                min_size=1, max_size=8))
def test_logsumexp_hypothesis_matches_naive(vals):
    x = np.asarray(vals)
    out = T.logsumexp(Tensor(x)).item()
    ref = float(np.log(np.sum(np.exp(x))))
    assert abs(out - ref) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_matmul_gradient_hypothesis(k, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    a = Tensor(rng.normal(size=(3, k)), requires_grad=True)
    b = Tensor(rng.normal(size=(k, 2)), requires_grad=True)

    def build(leaves):
        return T.tsum(T.matmul(leaves["a"], leaves["b"]) ** Tensor(2.0))

    assert grad_check(build, {"a": a, "b": b}, rel_tol=1e-4) == []


def test_finite_difference_helper_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = finite_difference(lambda v: float((v ** 2).sum()), x)
    assert np.max(np.abs(g - 2.0 * x)) <= 1e-8
