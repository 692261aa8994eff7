"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every model computation is expressed through the operations in this module,
so gradients of any scalar result are available mechanically: run the
computation inside a ``with Tape() as tape`` block, then call
``backward(loss, tape)`` and read ``.grad`` off the leaf tensors.

Outside a tape block the same operations run as plain (and cheaper) value
computations, which is what inference and finite-difference probing use.
"""

from __future__ import annotations

import math
import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition of an operation was violated."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf value appeared where finite values are required."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _check_finite(arr: np.ndarray, where: str) -> None:
    # a single sum is cheap at these sizes and propagates NaN/Inf
    if not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    A tensor with no tape attachment is immutable by convention and safe to
    share across threads for read-only evaluation. Gradients accumulate into
    ``grad`` across backward passes until ``zero_grad`` resets them.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensors must have at least one element")
        _check_finite(arr, "tensor value")
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


class Tape:
    """Ordered record of executed differentiable operations.

    Operations append in execution order, so inputs always precede their
    consumers; one reverse sweep visits each operation exactly once. A tape
    may be replayed backward only once.
    """

    __slots__ = ("records", "_consumed")

    def __init__(self):
        self.records: list = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def zero_grad(tensors) -> None:
    """Reset gradient buffers; required between optimisation steps."""
    for t in tensors:
        t.grad = None


def backward(loss: Tensor, tape: Tape, seed: float = 1.0) -> None:
    """Reverse-accumulate d(loss)/dx into ``.grad`` for tensors on the tape.

    ``seed`` scales the whole gradient (used when a caller folds several
    per-example losses into one batch mean). Gradients add into any existing
    ``.grad`` buffers; the caller zeroes them explicitly between steps.
    Replaying a tape twice is an error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if tape._consumed:
        raise ContractError("tape already replayed backward; zero grads and rebuild the tape")
    tape._consumed = True
    _accum(loss, np.asarray(seed, dtype=np.float64).reshape(loss.data.shape))
    for out, fn in reversed(tape.records):
        g = out.grad
        if g is not None:
            fn(g)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports matrix @ matrix and matrix @ vector."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, b=b, ad=ad, bd=bd):
            if bd.ndim == 1:
                _accum(a, np.outer(g, bd))
            else:
                _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        tape.records.append((out, bwd))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)
        tape.records.append((out, bwd))
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"hadamard: shapes differ {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, b=b, ad=ad, bd=bd):
            _accum(a, g * bd)
            _accum(b, g * ad)
        tape.records.append((out, bwd))
    return out


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, x=x, y=y):
            _accum(x, g * y * (1.0 - y))
        tape.records.append((out, bwd))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, x=x, y=y):
            _accum(x, g * (1.0 - y * y))
        tape.records.append((out, bwd))
    return out


def softmax(v: Tensor) -> Tensor:
    """Exponential normalisation of a vector, max-subtracted for stability."""
    vd = v.data
    if vd.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {vd.shape}")
    e = np.exp(vd - vd.max())
    y = e / e.sum()
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, v=v, y=y):
            _accum(v, y * (g - float(g @ y)))
        tape.records.append((out, bwd))
    return out


def log_softmax(v: Tensor) -> Tensor:
    vd = v.data
    if vd.ndim != 1:
        raise ShapeError(f"log_softmax expects a vector, got shape {vd.shape}")
    s = vd - vd.max()
    y = s - math.log(float(np.exp(s).sum()))
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, v=v, y=y):
            _accum(v, g - np.exp(y) * float(np.sum(g)))
        tape.records.append((out, bwd))
    return out


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two vectors, a first."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError("concat expects vectors")
    na = a.data.shape[0]
    out = Tensor(np.concatenate([a.data, b.data]))
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, b=b, na=na):
            _accum(a, g[:na])
            _accum(b, g[na:])
        tape.records.append((out, bwd))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    out = Tensor(np.ascontiguousarray(a.data.T))
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a):
            _accum(a, g.T)
        tape.records.append((out, bwd))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a plain (non-differentiated) scalar."""
    out = Tensor(a.data * s)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, s=s):
            _accum(a, g * s)
        tape.records.append((out, bwd))
    return out


def elem_scale(a: Tensor, factors: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (no gradient to the factors)."""
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != a.data.shape:
        raise ShapeError(f"elem_scale: shapes differ {a.data.shape} vs {factors.shape}")
    out = Tensor(a.data * factors)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a, factors=factors):
            _accum(a, g * factors)
        tape.records.append((out, bwd))
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    out = Tensor(np.sum(a.data))
    tape = _active_tape()
    if tape is not None:
        def bwd(g, a=a):
            _accum(a, np.broadcast_to(g, a.data.shape))
        tape.records.append((out, bwd))
    return out


def pick(v: Tensor, i: int) -> Tensor:
    """Select element ``i`` of a vector as a scalar."""
    if v.data.ndim != 1:
        raise ShapeError("pick expects a vector")
    if not 0 <= i < v.data.shape[0]:
        raise ContractError(f"pick index {i} out of range for length {v.data.shape[0]}")
    out = Tensor(v.data[i])
    tape = _active_tape()
    if tape is not None:
        def bwd(g, v=v, i=i):
            z = np.zeros_like(v.data)
            z[i] = g
            _accum(v, z)
        tape.records.append((out, bwd))
    return out


def row(m: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a matrix as a vector (embedding lookup)."""
    if m.data.ndim != 2:
        raise ShapeError("row expects a matrix")
    if not 0 <= i < m.data.shape[0]:
        raise ContractError(f"row index {i} out of range for {m.data.shape[0]} rows")
    out = Tensor(m.data[i].copy())
    tape = _active_tape()
    if tape is not None:
        def bwd(g, m=m, i=i):
            z = np.zeros_like(m.data)
            z[i] = g
            _accum(m, z)
        tape.records.append((out, bwd))
    return out


def affine(terms, bias: Tensor | None = None) -> Tensor:
    """Sum of matrix-vector products plus an optional bias, as one tape record.

    ``terms`` is a sequence of (matrix, vector) tensor pairs with a common
    output dimension. Equivalent to chaining matmul/add but with far fewer
    tape records, which matters inside the recurrent cells.
    """
    if not terms:
        raise ShapeError("affine needs at least one (matrix, vector) term")
    n_out = terms[0][0].data.shape[0]
    acc = bias.data.copy() if bias is not None else np.zeros(n_out)
    if acc.shape != (n_out,):
        raise ShapeError(f"affine: bias shape {acc.shape} does not match output dim {n_out}")
    captured = []
    for w, x in terms:
        wd, xd = w.data, x.data
        if wd.ndim != 2 or xd.ndim != 1 or wd.shape != (n_out, xd.shape[0]):
            raise ShapeError(f"affine: term shapes {wd.shape} @ {xd.shape} vs output dim {n_out}")
        acc = acc + wd @ xd
        captured.append((w, x, wd, xd))
    out = Tensor(acc)
    tape = _active_tape()
    if tape is not None:
        def bwd(g, captured=captured, bias=bias):
            if bias is not None:
                _accum(bias, g)
            for w, x, wd, xd in captured:
                _accum(w, np.outer(g, xd))
                _accum(x, wd.T @ g)
        tape.records.append((out, bwd))
    return out


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))
