import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dyntrans import tensor as tt
from dyntrans.gradcheck import grad_check, rel_error
from dyntrans.nn import LSTMCell, Linear, dropout_apply, lstm_step
from dyntrans.rng import RngStream
from dyntrans.tensor import NonFiniteError, Tensor, no_grad


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_examples():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tt.matmul(np.eye(2), A).data, A)
    assert np.array_equal(tt.matmul(A, np.ones((2, 1))).data, [[3.0], [7.0]])
    with pytest.raises(ValueError):
        tt.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad(np_rng):
    a, b = param(np_rng.normal(size=(3, 4))), param(np_rng.normal(size=(4, 2)))
    rep = grad_check(lambda: (tt.matmul(a, b) * tt.matmul(a, b)).sum(), {"a": a, "b": b})
    assert rep.ok, rep.max_rel_err


def test_masked_softmax_examples():
    assert np.allclose(tt.masked_softmax(np.zeros(4)).data, 0.25, atol=0, rtol=1e-15)
    p = tt.masked_softmax(np.array([3.0, -1.0, 2.0]), np.array([False, True, False])).data
    assert p.tolist() == [0.0, 1.0, 0.0]
    p = tt.masked_softmax(np.array([0.0, math.log(2.0)])).data
    assert abs(p[0] - 1 / 3) < 1e-15 and abs(p[1] - 2 / 3) < 1e-15
    with pytest.raises(ValueError):
        tt.masked_softmax(np.zeros((2, 3)), np.array([[True, False, True], [False, False, False]]))


@given(st.integers(0, 10_000))
def test_masked_softmax_rows(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(5, 7)) * 10
    mask = r.random((5, 7)) < 0.6
    mask[np.arange(5), r.integers(0, 7, 5)] = True
    p = tt.masked_softmax(x, mask).data
    assert np.all(p[~mask] == 0.0)
    assert np.max(np.abs(p.sum(-1) - 1)) < 1e-12


def test_masked_softmax_grad(np_rng):
    x = param(np_rng.normal(size=(3, 5)))
    mask = np.array([[1, 1, 0, 1, 0], [0, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=bool)
    w = np_rng.normal(size=(3, 5))
    assert grad_check(lambda: (tt.masked_softmax(x, mask) * w).sum(), [x]).ok


def test_layer_norm_examples(np_rng):
    g, b = np.ones(3), np.zeros(3)
    assert np.array_equal(tt.layer_norm(np.full(3, 2.5), g, b).data, np.zeros(3))
    out = tt.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0).data
    assert out.tolist() == [1.0, -1.0]
    x, gp, bp = param(np_rng.normal(size=(4, 6))), param(np_rng.normal(size=6)), param(np_rng.normal(size=6))
    w = np_rng.normal(size=(4, 6))
    assert grad_check(lambda: (tt.layer_norm(x, gp, bp) * w).sum(), [x, gp, bp]).ok


def test_lstm_step_examples(np_rng):
    cell = LSTMCell(3, 4, RngStream(0))
    for p in cell.parameters():
        p.data[...] = 0.0
    h, c = lstm_step(np_rng.normal(size=3), (np.zeros(4), np.zeros(4)), cell)
    assert np.array_equal(h.data, np.zeros(4)) and np.array_equal(c.data, np.zeros(4))

    cell = LSTMCell(3, 4, RngStream(1))
    state = (np_rng.normal(size=4), np_rng.normal(size=4))
    a = lstm_step(np.zeros(3), state, cell)
    b = lstm_step(np.zeros(3), state, cell)
    assert np.array_equal(a[0].data, b[0].data)
    # with zero input only the bias and recurrent term enter the gates
    gates = cell.bias.data + state[0] @ cell.w_hh.data
    i, f, g, o = np.split(gates, 4)
    sig = lambda z: 1 / (1 + np.exp(-z))
    c_ref = sig(f) * state[1] + sig(i) * np.tanh(g)
    assert np.allclose(a[1].data, c_ref, rtol=0, atol=1e-15)
    assert np.allclose(a[0].data, sig(o) * np.tanh(c_ref), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        lstm_step(np.zeros(2), state, cell)


def test_lstm_grad(np_rng):
    cell = LSTMCell(3, 4, RngStream(2))
    x = param(np_rng.normal(size=(2, 3)))
    h0, c0 = param(np_rng.normal(size=(2, 4))), param(np_rng.normal(size=(2, 4)))
    w = np_rng.normal(size=(2, 4))

    def f():
        h, c = lstm_step(x, (h0, c0), cell)
        return (h * w).sum() + (c * c).sum()

    rep = grad_check(f, {"x": x, "h": h0, "c": c0, **dict(cell.named_parameters())})
    assert rep.ok, rep.max_rel_err


def test_dropout():
    x = np.ones((4, 5))
    rng = RngStream(0)
    assert np.array_equal(dropout_apply(x, 0.0, rng, True).data, x)
    assert np.array_equal(dropout_apply(x, 0.1, rng, False).data, x)
    big = dropout_apply(np.ones(10**6), 0.5, RngStream(3), True).data
    assert abs(big.mean() - 1.0) < 0.01
    assert set(np.unique(big)) <= {0.0, 2.0}
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            dropout_apply(x, bad, rng, True)


def test_backward_examples(np_rng):
    x, y = param(np_rng.normal(size=5)), param(np_rng.normal(size=5))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(5))
    x.grad = None
    (x * y).sum().backward()
    assert np.array_equal(x.grad, y.data) and np.array_equal(y.grad, x.data)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_backward_accumulates_across_uses():
    x = param([2.0])
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0]
    (x * 3).sum().backward()
    assert x.grad.tolist() == [8.0]


def test_two_layer_perceptron_grad(np_rng):
    rng = RngStream(4)
    l1, l2 = Linear(4, 6, rng), Linear(6, 3, rng)
    x = np_rng.normal(size=(5, 4))
    labels = np_rng.integers(0, 3, 5)

    def f():
        lp = tt.log_softmax(l2(tt.tanh(l1(x))))
        return -tt.index(lp, (np.arange(5), labels)).mean()

    rep = grad_check(f, {**dict(l1.named_parameters("l1.")), **dict(l2.named_parameters("l2."))})
    assert rep.ok, rep.max_rel_err


def test_non_finite_is_an_error():
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        tt.log(np.array([-1.0, 1.0]))
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        tt.div(np.ones(2), np.zeros(2))


def test_no_grad():
    x = param([1.0, 2.0])
    with no_grad():
        y = x * 3
    assert not y.requires_grad
    assert (x * 3).requires_grad


def test_grad_check_negative_control(np_rng):
    w = param(np_rng.normal(size=(3, 3)))
    x = np_rng.normal(size=3)

    def corrupted():
        out = tt.matmul(w, x).sum()
        bw = out._backward
        out._backward = lambda g: tuple(None if p is None else 1.7 * p for p in bw(g))
        return out

    rep = grad_check(corrupted, [w])
    assert not rep.ok and rep.failures == ["p0"]
    lin = grad_check(lambda: tt.matmul(w, x).sum(), [w])
    assert lin.worst < 1e-9


def test_rel_error_floor():
    assert rel_error(np.array([0.0]), np.array([1e-12]))[0] < 1e-6


UNARY = {
    "exp": tt.exp, "tanh": tt.tanh, "sigmoid": tt.sigmoid, "neg": tt.neg,
    "log": lambda a: tt.log(tt.exp(a) + 1.0), "power": lambda a: tt.power(tt.exp(a), 1.5),
    "relu": lambda a: tt.relu(a + 0.0), "softmax": lambda a: tt.softmax(a, -1),
    "log_softmax": lambda a: tt.log_softmax(a, -1), "mean": lambda a: tt.mean(a, axis=0),
    "transpose": lambda a: tt.transpose(a, (1, 0)), "reshape": lambda a: tt.reshape(a, (-1,)),
    "index": lambda a: a[np.array([0, 2, 2]), 1:],
}

BINARY = {
    "add": tt.add, "sub": tt.sub, "mul": tt.mul, "div": lambda a, b: tt.div(a, tt.exp(b)),
    "concat": lambda a, b: tt.concat([a, b], axis=0), "stack": lambda a, b: tt.stack([a, b], axis=1),
    "matmul": lambda a, b: tt.matmul(a, tt.transpose(b, (1, 0))),
    "broadcast_add": lambda a, b: tt.add(a, b[:1]),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_op_grads(name, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, 4))
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)   # keep away from the kink
    a = param(x)
    out_shape = UNARY[name](Tensor(x)).shape
    w = r.normal(size=out_shape)
    rep = grad_check(lambda: (UNARY[name](a) * w).sum(), [a])
    assert rep.ok, rep.max_rel_err


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(5))
def test_binary_op_grads(name, seed):
    r = np.random.default_rng(seed)
    a, b = param(r.normal(size=(3, 4))), param(r.normal(size=(3, 4)))
    w = r.normal(size=BINARY[name](Tensor(a.data), Tensor(b.data)).shape)
    rep = grad_check(lambda: (BINARY[name](a, b) * w).sum(), [a, b])
    assert rep.ok, rep.max_rel_err


def test_linear_and_lstm_pointwise_grads(np_rng):
    x, W, bias = param(np_rng.normal(size=(2, 3, 4))), param(np_rng.normal(size=(4, 5))), param(np_rng.normal(size=5))
    w = np_rng.normal(size=(2, 3, 5))
    assert grad_check(lambda: (tt.linear(x, W, bias) * w).sum(), [x, W, bias]).ok
    gates, c = param(np_rng.normal(size=(2, 8))), param(np_rng.normal(size=(2, 2)))
    w2 = np_rng.normal(size=(2, 4))
    assert grad_check(lambda: (tt.lstm_pointwise(gates, c) * w2).sum(), [gates, c]).ok


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.data.size == int(np.prod(t.shape))
    (t * t).sum().backward()
    assert t.grad.shape == t.shape
