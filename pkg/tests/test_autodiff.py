import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from supertokens import autodiff as ad
from supertokens.autodiff import NumericError, ShapeError, Tape, Tensor


def grad_of(f, *xs):
    for x in xs:
        x.requires_grad, x.grad = True, None
    with Tape() as tape:
        out = f(*xs)
    tape.backward(out)
    return [x.grad for x in xs]


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    eye = Tensor(np.eye(2))
    assert np.array_equal((eye @ eye).data, np.eye(2))


def test_matmul_hand_example():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_zero():
    rng = np.random.default_rng(0)
    assert not ad.matmul(Tensor(np.zeros((3, 4))), Tensor(rng.normal(size=(4, 5)))).data.any()


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_formula():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    a.requires_grad = b.requires_grad = True
    with Tape() as tape:
        out = ad.matmul(a, b)
    tape.backward(out, g)
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


@given(st.integers(0, 10_000))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    m, k, n, p = rng.integers(1, 6, size=4)
    a, b, c = (Tensor(rng.uniform(-1, 1, size=s)) for s in [(m, k), (k, n), (n, p)])
    assert np.allclose(((a @ b) @ c).data, (a @ (b @ c)).data, rtol=0, atol=1e-10)


# ---------------------------------------------------------------- softmax

@pytest.mark.parametrize("x, expect", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([0.0, math.log(3.0)], [0.25, 0.75]),
])
def test_softmax_examples(x, expect):
    assert np.allclose(ad.softmax(Tensor(x)).data, expect, rtol=0, atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([0.0, np.nan]))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all((out >= 0) & (out <= 1))
    assert np.allclose(out.sum(-1), 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- smooth L1

@pytest.mark.parametrize("diff, expect", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_smooth_l1_examples(diff, expect):
    assert ad.smooth_l1(Tensor([diff]), Tensor([0.0])).item() == pytest.approx(expect, abs=1e-15)


def test_smooth_l1_is_a_mean():
    pred, target = Tensor([0.5, 2.0]), Tensor([0.0, 0.0])
    assert ad.smooth_l1(pred, target).item() == pytest.approx((0.125 + 1.5) / 2)


def test_smooth_l1_gradient_in_quadratic_branch():
    x = Tensor(np.full(4, 0.5))
    (g,) = grad_of(lambda t: ad.smooth_l1(t, Tensor(np.zeros(4))), x)
    # derivative x / beta per element, divided by the element count of the mean
    assert np.allclose(g, 0.5 / 4, rtol=0, atol=1e-15)


def test_smooth_l1_shape_error():
    with pytest.raises(ShapeError):
        ad.smooth_l1(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_smooth_l1_bad_beta():
    with pytest.raises(ValueError):
        ad.smooth_l1(Tensor([1.0]), Tensor([0.0]), beta=0.0)


# ---------------------------------------------------------------- gradient oracle

def test_check_gradients_sum_is_exact():
    x = Tensor(np.random.default_rng(2).uniform(-1, 1, size=(3, 4)))
    rep = ad.check_gradients(lambda t: ad.sum(t), x)
    assert np.array_equal(rep.analytic[0], np.ones((3, 4)))
    assert rep.max_rel_error < 1e-9


def test_check_gradients_matmul_chain():
    rng = np.random.default_rng(3)
    a, b, c = (Tensor(rng.uniform(-1, 1, size=(3, 3))) for _ in range(3))
    rep = ad.check_gradients(lambda x, y, z: ad.sum(x @ y @ z), [a, b, c], eps=1e-5)
    assert rep.max_rel_error < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_gradients_reports_nonfinite():
    x = Tensor(np.array([0.0]))
    with pytest.raises(NumericError):
        ad.check_gradients(lambda t: ad.sum(ad.log(t)), x)


def _u(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape))


PRIMITIVES = {
    "add": (lambda a, b: ad.sum(ad.add(a, b) * ad.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum(ad.sub(a, b) * a), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.sum(ad.mul(a, b)), [(2, 3), (2, 3)]),
    "div": (lambda a, b: ad.sum(ad.div(a, b + 3.0)), [(2, 3), (2, 3)]),
    "neg": (lambda a: ad.sum(ad.neg(a) * a), [(5,)]),
    "matmul": (lambda a, b: ad.sum(ad.matmul(a, b)), [(2, 3, 4), (4, 2)]),
    "transpose": (lambda a, b: ad.sum(ad.transpose(a) * b), [(3, 4), (4, 3)]),
    "reshape": (lambda a, b: ad.sum(ad.reshape(a, (6, 2)) * b), [(3, 4), (6, 2)]),
    "take": (lambda a: ad.sum(a[1:, ::2] * a[1:, ::2]), [(3, 4)]),
    "concat": (lambda a, b: ad.sum(ad.concat([a, b], axis=0) * ad.concat([b, a], axis=0)),
               [(2, 3), (2, 3)]),
    "sum": (lambda a: ad.sum(ad.sum(a, axis=1) * ad.sum(a, axis=1)), [(3, 4)]),
    "mean": (lambda a: ad.sum(ad.mean(a, axis=0, keepdims=True) * a), [(3, 4)]),
    "amax": (lambda a: ad.sum(ad.amax(a, axis=1) * 2.0), [(3, 4)]),
    "exp": (lambda a: ad.sum(ad.exp(a)), [(3, 4)]),
    "log": (lambda a: ad.sum(ad.log(a * a + 1.0)), [(3, 4)]),
    "gelu": (lambda a: ad.sum(ad.gelu(a) * a), [(3, 4)]),
    "sigmoid": (lambda a: ad.sum(ad.sigmoid(a) * a), [(3, 4)]),
    "softmax": (lambda a, b: ad.sum(ad.softmax(a, axis=-1) * b), [(3, 4), (3, 4)]),
    "log_softmax": (lambda a, b: ad.sum(ad.log_softmax(a, axis=-1) * b), [(3, 4), (3, 4)]),
    "layer_norm": (lambda a, w, b: ad.sum(ad.layer_norm(a, w, b) * ad.layer_norm(a, w, b)),
                   [(3, 4), (4,), (4,)]),
    "smooth_l1": (lambda a, b: ad.smooth_l1(a * 3.0, b), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_matches_finite_differences(name, seed):
    f, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    xs = [_u(rng, *s) for s in shapes]
    assert ad.check_gradients(f, xs, eps=1e-5).max_rel_error < 1e-6


def test_tape_reverse_order_and_leaf_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = ad.sum(x * x) + ad.sum(unused * 0.0)
    tape.backward(y)
    assert np.array_equal(x.grad, [2.0, 4.0])
    assert unused.grad is not None and not unused.grad.any()


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_straight_through_forward_hard_backward_soft():
    soft = Tensor([0.2, 0.8], requires_grad=True)
    with Tape() as tape:
        st_ = ad.straight_through(np.array([0.0, 1.0]), soft)
        out = ad.sum(st_ * Tensor([3.0, 5.0]))
    assert np.array_equal(st_.data, [0.0, 1.0])
    tape.backward(out)
    assert np.array_equal(soft.grad, [3.0, 5.0])


def test_layer_norm_standardizes():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(3, 5, size=(6, 16)))
    out = ad.layer_norm(x, np.ones(16), np.zeros(16), eps=0.0).data
    assert np.allclose(out.mean(-1), 0, atol=1e-10)
    assert np.allclose(out.var(-1), 1, atol=1e-10)


def test_flop_counter_matmul_convention():
    counter = ad.FlopCounter()
    with counter, ad.component("x"):
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
        ad.mul(Tensor(np.ones(7)), 2.0)
    assert counter.total == 2 * 3 * 4 * 5
    assert counter.under("x") == 120
