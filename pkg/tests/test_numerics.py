import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relayformer.errors import ContractError, NonFiniteError, ShapeError
from relayformer.numerics import (
    CosineSchedule,
    OptimState,
    Tensor,
    adamw_step,
    concat,
    count_macs,
    gelu,
    layer_norm,
    matmul,
    sigmoid,
    softmax_rows,
    stack,
)
from relayformer.numerics import rtns
from relayformer.numerics.gradcheck import gradcheck


def f64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    x = np.array([[1.5, -2.0], [3.0, 4.25]])
    assert np.array_equal(matmul(f64(np.eye(2)), f64(x)).data, x)


def test_matmul_hand_arithmetic():
    assert matmul(f64([[1, 2]]), f64([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(matmul(f64(a), f64(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(f64(np.ones((2, 3))), f64(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(f64(np.ones((2, 2, 3))), f64(np.ones((3, 3, 4))))


def test_matmul_batch_broadcast_grad(rng):
    a = f64(rng.normal(size=(2, 3, 4, 5)), grad=True)
    b = f64(rng.normal(size=(5, 2)), grad=True)
    errs = gradcheck(lambda: (matmul(a, b) ** 2).sum(), [a, b])
    assert max(errs.values()) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = (f64(r.normal(size=s)) for s in [(m, k), (k, n), (n, p)])
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    scale = max(np.abs(left).max(), 1e-300)
    assert np.abs(left - right).max() / scale < 1e-9


def test_matmul_counts_macs(rng):
    with count_macs() as c:
        matmul(f64(np.ones((2, 3, 4))), f64(np.ones((4, 5))))
    assert c["matmul"] == 2 * 3 * 4 * 5


# -- softmax --------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_rows(f64([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    y = softmax_rows(f64([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0)
    assert y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_exp_normalize(rng):
    x = rng.normal(size=7)
    oracle = np.array([math.exp(v) for v in x])
    oracle /= oracle.sum()
    np.testing.assert_allclose(softmax_rows(f64(x)).data, oracle, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(row):
    y = softmax_rows(f64(row)).data
    assert abs(y.sum() - 1.0) < 1e-6


# -- layer norm -----------------------------------------------------------


def test_layer_norm_constant_vector():
    d = 5
    y = layer_norm(f64(np.full(d, 3.7)), f64(np.ones(d)), f64(np.zeros(d))).data
    assert np.all(y == 0.0)


def test_layer_norm_already_normalized():
    y = layer_norm(f64([1.0, -1.0]), f64(np.ones(2)), f64(np.zeros(2))).data
    np.testing.assert_allclose(y, np.array([1.0, -1.0]) / math.sqrt(1.0 + 1e-5), atol=1e-15)


def test_layer_norm_matches_two_pass(rng):
    x, g, b = rng.normal(size=9), rng.normal(size=9), rng.normal(size=9)
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    oracle = [(v - mean) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(x, g, b)]
    np.testing.assert_allclose(layer_norm(f64(x), f64(g), f64(b)).data, oracle, rtol=0, atol=1e-10)


# -- gelu -----------------------------------------------------------------


def erf_series(x, terms=60):
    # Maclaurin series, converges quickly for |x| <~ 3
    s = 0.0
    for n in range(terms):
        s += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * s


def test_gelu_zero():
    assert gelu(f64([0.0])).data[0] == 0.0


def test_gelu_asymptotes():
    y = gelu(f64([20.0, -20.0])).data
    assert y[0] == pytest.approx(20.0, abs=1e-12)
    assert abs(y[1]) < 1e-12


def test_gelu_at_one_matches_erf_series():
    oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
    assert abs(gelu(f64([1.0])).data[0] - oracle) < 1e-10


def test_gelu_monotone_on_grid():
    grid = np.linspace(-0.75, 6, 200)
    assert np.all(np.diff(gelu(f64(grid)).data) > 0)


# -- backward -------------------------------------------------------------


def test_grad_of_sum_is_ones(rng):
    x = f64(rng.normal(size=(2, 3, 4)), grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_grad_of_square_sum(rng):
    x = f64(rng.normal(size=(5, 2)), grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_backward_requires_scalar(rng):
    x = f64(rng.normal(size=3), grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_accumulates_across_calls(rng):
    x = f64(rng.normal(size=4), grad=True)
    x.sum().backward()
    x.sum().backward()
    assert np.array_equal(x.grad, np.full(4, 2.0))


def _bce(p, m):
    eps = 1e-7
    p = p.clip(eps, 1 - eps)
    return -(m * p.log() + (1 - m) * (1 - p).log()).mean()


def test_composite_graph_matches_finite_differences(rng):
    x = f64(rng.normal(size=(3, 4)), grad=True)
    w = f64(rng.normal(size=(4, 5)) * 0.5, grad=True)
    b = f64(rng.normal(size=5) * 0.1, grad=True)
    target = f64((rng.random((3, 5)) > 0.5).astype(float))

    def loss():
        h = gelu(x @ w + b)
        return _bce(softmax_rows(h), target)

    errs = gradcheck(loss, {"x": x, "w": w, "b": b}, h=1e-5)
    assert max(errs.values()) < 1e-5, errs


def test_shared_subexpression_accumulates_both_paths(rng):
    x = f64(rng.normal(size=(2, 3)), grad=True)

    def loss():
        s = sigmoid(x)
        return (s * s.exp()).sum() + (s @ s.T).sum()

    assert max(gradcheck(loss, [x]).values()) < 1e-5


@pytest.mark.parametrize(
    "build",
    [
        lambda x, y: softmax_rows(x * 3.0),
        lambda x, y: layer_norm(x, y[0], y[1] * 0.1),
        lambda x, y: gelu(x),
        lambda x, y: sigmoid(x),
        lambda x, y: x / (y[0] * y[0] + 1.0),
        lambda x, y: (x - y[1]).exp(),
        lambda x, y: (x * x + 1.0).log(),
        lambda x, y: (x * x + 0.5) ** 1.5,
        lambda x, y: (x * x + 0.5).sqrt(),
        lambda x, y: x.reshape(4, 3).T.transpose(1, 0).swapaxes(0, 1),
        lambda x, y: x[1:, ::2] * 2.0,
        lambda x, y: x[np.array([0, 0, 2])],
        lambda x, y: concat([x, x * 2.0], axis=1),
        lambda x, y: stack([x, -x], axis=0),
        lambda x, y: x.mean(axis=1, keepdims=True) * x,
        lambda x, y: x.broadcast_to((2, 3, 4)),
        lambda x, y: x.clip(-0.5, 0.5),
        lambda x, y: x.astype("f64"),
    ],
)
def test_every_op_gradcheck(rng, build):
    x = f64(rng.normal(size=(3, 4)), grad=True)
    y = [f64(rng.normal(size=4), grad=True), f64(rng.normal(size=4), grad=True)]
    w = f64(rng.normal(size=build(x, y).shape))
    errs = gradcheck(lambda: (build(x, y) * w).sum(), [x, *y])
    assert max(errs.values()) < 1e-5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_is_error():
    with pytest.raises(NonFiniteError):
        f64([1e308]) * 10.0


# -- adamw ----------------------------------------------------------------


def test_adamw_zero_grad_no_decay_leaves_params():
    p = {"w": f64(np.arange(6.0).reshape(2, 3))}
    before = p["w"].data.copy()
    state = OptimState(schedule=CosineSchedule(base_lr=1e-3, total_steps=10), weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, state, grads={"w": np.zeros((2, 3))})
    assert np.array_equal(p["w"].data, before)


def test_warmup_end_lr_equals_base():
    sched = CosineSchedule(base_lr=1e-4, min_lr=5e-7, warmup_steps=5, total_steps=50)
    assert sched.lr_at(5) == 1e-4
    assert sched.lr_at(1) == pytest.approx(2e-5)
    assert sched.lr_at(50) == pytest.approx(5e-7)
    for s in range(5, 80):
        assert 5e-7 - 1e-18 <= sched.lr_at(s) <= 1e-4


def test_adamw_single_param_hand_recurrence():
    lr, wd, b1, b2, eps = 1e-2, 0.1, 0.9, 0.999, 1e-8
    sched = CosineSchedule(base_lr=lr, min_lr=lr, warmup_steps=0, total_steps=10)
    state = OptimState(schedule=sched, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
    p = {"w": f64([[0.7]])}
    w, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 0.05], start=1):
        adamw_step(p, state, grads={"w": np.array([[g]])})
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p["w"].data[0, 0] - w) < 1e-12


def test_adamw_shape_mismatch():
    state = OptimState()
    with pytest.raises(ShapeError):
        adamw_step({"w": f64(np.zeros((2, 2)))}, state, grads={"w": np.zeros(3)})


# -- rtns container ---------------------------------------------------------


@pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.float64, 1)])
def test_rtns_layout_and_round_trip(rng, dtype, code):
    arr = rng.normal(size=(2, 3, 5)).astype(dtype)
    buf = rtns.encode(Tensor(arr))
    assert buf[:4] == b"RTNS"
    assert struct.unpack_from("<IBB", buf, 4) == (1, code, 3)
    assert struct.unpack_from("<3Q", buf, 10) == (2, 3, 5)
    assert buf[34:] == arr.astype(np.dtype(dtype).newbyteorder("<")).tobytes()
    back = rtns.decode(buf)
    assert back.data.dtype == dtype
    assert np.array_equal(back.data, arr)


def test_rtns_rejects_garbage():
    with pytest.raises(ContractError):
        rtns.decode(b"NOPE" + bytes(10))
