import math

import numpy as np
import pytest

from sgncap import numerics as nm
from sgncap.numerics import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    zero_grad,
)


def test_matmul_identity():
    out = nm.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [7.0]])


def test_matmul_zero():
    out = nm.matmul(Tensor(np.zeros((2, 2))), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_direct_triple_loop_oracle():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    expect = [[0.0, 0.0], [0.0, 0.0]]
    for i in range(2):
        for j in range(2):
            for k in range(2):
                expect[i][j] += a[i][k] * b[k][j]
    assert expect == [[19.0, 22.0], [43.0, 50.0]]
    out = nm.matmul(Tensor(a), Tensor(b))
    assert np.array_equal(out.data, expect)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_constant_is_uniform():
    for c in (-3.0, 0.0, 17.5):
        out = nm.softmax(Tensor([c, c, c, c]))
        assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_single_element():
    assert nm.softmax(Tensor([4.2])).data[0] == 1.0


def test_softmax_exp_normalisation_oracle():
    # direct evaluation: exp(0)=1, exp(ln 3)=3, total 4
    out = nm.softmax(Tensor([0.0, math.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_empty_is_shape_error():
    with pytest.raises((ShapeError, ValueError)):
        nm.softmax(Tensor([]))


def test_softmax_simplex_property():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        v = Tensor(rng.normal(0.0, 5.0, size=rng.integers(1, 12)))
        y = nm.softmax(v).data
        assert (y > 0).all()
        assert abs(y.sum() - 1.0) <= 1e-9


def test_elementwise_trivia():
    assert nm.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert nm.tanh(Tensor([0.0])).data[0] == 0.0
    assert np.array_equal(nm.concat(Tensor([1.0, 2.0]), Tensor([3.0])).data, [1.0, 2.0, 3.0])


def test_elementwise_ranges():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(0.0, 4.0, size=50))
    s = nm.sigmoid(x).data
    t = nm.tanh(x).data
    assert ((s > 0) & (s < 1)).all()
    assert ((t > -1) & (t < 1)).all()


def test_shape_mismatch_errors():
    a, b = Tensor(np.ones(3)), Tensor(np.ones(4))
    for op in (nm.add, nm.hadamard):
        with pytest.raises(ShapeError):
            op(a, b)


def test_backward_sum_gives_ones():
    p = Tensor([[1.0, -2.0], [0.5, 3.0]])
    with Tape() as tape:
        loss = nm.sum_all(p)
    backward(loss, tape)
    assert np.array_equal(p.grad, np.ones((2, 2)))


def test_backward_quadratic():
    p = Tensor([1.0, 2.0])
    with Tape() as tape:
        loss = nm.sum_all(nm.hadamard(p, p))
    backward(loss, tape)
    assert np.allclose(p.grad, [2.0, 4.0], atol=1e-15)


def test_backward_rejects_nonscalar_loss():
    p = Tensor([1.0, 2.0])
    with Tape() as tape:
        out = nm.hadamard(p, p)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_backward_twice_is_error():
    p = Tensor([1.0])
    with Tape() as tape:
        loss = nm.sum_all(p)
    backward(loss, tape)
    with pytest.raises(ContractError):
        backward(loss, tape)


def test_grad_accumulates_until_zeroed():
    p = Tensor([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = nm.sum_all(p)
        backward(loss, tape)
    assert np.array_equal(p.grad, [2.0, 2.0])
    zero_grad([p])
    assert p.grad is None


def test_nonfinite_is_checked_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        Tensor([float("inf")])


def test_pick_and_row_bounds():
    with pytest.raises(ContractError):
        nm.pick(Tensor([1.0, 2.0]), 2)
    with pytest.raises(ContractError):
        nm.row(Tensor(np.ones((2, 2))), -1)


def test_no_tape_means_no_recording():
    p = Tensor([1.0, 2.0])
    out = nm.sigmoid(p)
    assert out.grad is None and p.grad is None
    with Tape() as tape:
        nm.sigmoid(p)
    assert len(tape.records) == 1


def test_determinism_bit_identical():
    rng1 = np.random.default_rng(11)
    rng2 = np.random.default_rng(11)
    a1, a2 = rng1.normal(size=(4, 4)), rng2.normal(size=(4, 4))
    o1 = nm.tanh(nm.matmul(Tensor(a1), Tensor(a1))).data
    o2 = nm.tanh(nm.matmul(Tensor(a2), Tensor(a2))).data
    assert o1.tobytes() == o2.tobytes()


# --- central finite differences over every differentiable op ---------------

def _numeric_grad(fn, tensors, idx, eps=1e-6):
    """Central difference of fn() w.r.t. one flat entry of tensors[idx]."""
    grads = []
    flat = tensors[idx].data.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + eps
        up = fn()
        flat[j] = old - eps
        down = fn()
        flat[j] = old
        grads.append((up - down) / (2.0 * eps))
    return np.array(grads).reshape(tensors[idx].data.shape)


def _check_op(builder, tensors, tol=1e-6):
    """Compare backward grads of sum(op(...)) against central differences."""
    def value():
        return float(np.sum(builder(*tensors).data))

    zero_grad(tensors)
    with Tape() as tape:
        loss = nm.sum_all(builder(*tensors))
    backward(loss, tape)
    for i, t in enumerate(tensors):
        num = _numeric_grad(value, tensors, i)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-2)
        rel = np.abs(ana - num) / denom
        assert rel.max() < tol, f"op {builder} input {i}: rel err {rel.max():.3e}"


RNG = np.random.default_rng(99)


@pytest.mark.parametrize("case", [
    ("matmul_mm", lambda a, b: nm.matmul(a, b),
     [Tensor(RNG.normal(size=(3, 4))), Tensor(RNG.normal(size=(4, 2)))]),
    ("matmul_mv", lambda a, b: nm.matmul(a, b),
     [Tensor(RNG.normal(size=(3, 4))), Tensor(RNG.normal(size=4))]),
    ("add", nm.add, [Tensor(RNG.normal(size=5)), Tensor(RNG.normal(size=5))]),
    ("hadamard", nm.hadamard, [Tensor(RNG.normal(size=5)), Tensor(RNG.normal(size=5))]),
    ("sigmoid", nm.sigmoid, [Tensor(RNG.normal(size=6))]),
    ("tanh", nm.tanh, [Tensor(RNG.normal(size=6))]),
    ("softmax", nm.softmax, [Tensor(RNG.normal(size=6))]),
    ("log_softmax", nm.log_softmax, [Tensor(RNG.normal(size=6))]),
    ("concat", nm.concat, [Tensor(RNG.normal(size=3)), Tensor(RNG.normal(size=4))]),
    ("transpose", nm.transpose, [Tensor(RNG.normal(size=(3, 2)))]),
    ("scale", lambda a: nm.scale(a, -2.5), [Tensor(RNG.normal(size=4))]),
    ("elem_scale", lambda a: nm.elem_scale(a, np.array([0.5, 0.0, 2.0])),
     [Tensor(RNG.normal(size=3))]),
    ("sum_all", nm.sum_all, [Tensor(RNG.normal(size=(2, 3)))]),
    ("pick", lambda a: nm.pick(a, 2), [Tensor(RNG.normal(size=5))]),
    ("row", lambda a: nm.row(a, 1), [Tensor(RNG.normal(size=(3, 4)))]),
    ("affine", lambda w1, x1, w2, x2, b: nm.affine([(w1, x1), (w2, x2)], b),
     [Tensor(RNG.normal(size=(3, 4))), Tensor(RNG.normal(size=4)),
      Tensor(RNG.normal(size=(3, 2))), Tensor(RNG.normal(size=2)),
      Tensor(RNG.normal(size=3))]),
], ids=lambda case: case[0])
def test_op_gradients_match_central_differences(case):
    _, builder, tensors = case
    _check_op(builder, tensors)


def test_gradients_through_composite_graph():
    # softmax of a matvec picked against a target, the shape used everywhere
    w = Tensor(RNG.normal(size=(4, 3)))
    x = Tensor(RNG.normal(size=3))

    def build(w=w, x=x):
        return nm.pick(nm.log_softmax(nm.matmul(w, x)), 1)

    def value():
        return float(build().data)

    zero_grad([w, x])
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    for i, t in enumerate([w, x]):
        num = _numeric_grad(value, [w, x], i)
        rel = np.abs(t.grad - num) / np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), 1e-2)
        assert rel.max() < 1e-6
