"""Dense 2-D float64 tensors with a reverse-mode gradient tape.

Tensors are immutable once constructed. Every primitive returns a fresh
tensor and, when given a tape, records a pull-back closure so gradients can
be replayed through the computation in exact reverse application order.
"""

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add_rowvec",
    "relu",
    "sigmoid",
    "log_softmax",
    "clip",
    "sum_squares",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""


class Tensor:
    """Immutable row-major matrix of 64-bit floats."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C", ndmin=2)
        if arr.ndim != 2:
            raise ShapeError(f"tensor must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor rejects non-finite values")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr, op="op"):
        # Fast path for freshly computed arrays: takes ownership, no copy.
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class GradTape:
    """Ordered record of primitive applications, replayed backward in reverse.

    One tape serves one forward pass; it is not safe to share across
    concurrent training runs.
    """

    def __init__(self):
        self._records = []

    def record(self, out, pulls):
        """Register an op: `pulls` maps each input tensor to a vjp closure."""
        self._records.append((out, tuple(pulls)))

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Pull gradients of a 1x1 `loss` back to every touched tensor."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        table = {loss: np.ones((1, 1))}
        for out, pulls in reversed(self._records):
            g = table.get(out)
            if g is None:
                continue
            for src, pull in pulls:
                contrib = pull(g)
                acc = table.get(src)
                table[src] = contrib if acc is None else acc + contrib
        return Gradients(table)


class Gradients:
    """Gradient lookup from one backward pass.

    Tensors that never entered the forward computation get exact zeros.
    """

    def __init__(self, table):
        self._table = table

    def wrt(self, t):
        g = self._table.get(t)
        if g is None:
            return np.zeros((t.rows, t.cols))
        return g


def matmul(a, b, tape=None):
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data, "matmul")
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])
    return out


def add_rowvec(a, bias, tape=None):
    """Broadcast-add a 1 x cols bias row to every row of `a`."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeError(f"add_rowvec: bias {bias.shape} does not broadcast over {a.shape}")
    out = Tensor._wrap(a.data + bias.data, "add_rowvec")
    if tape is not None:
        tape.record(out, [
            (a, lambda g: g),
            (bias, lambda g: g.sum(axis=0, keepdims=True)),
        ])
    return out


def relu(a, tape=None):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = a.data > 0.0
    out = Tensor._wrap(np.where(mask, a.data, 0.0), "relu")
    if tape is not None:
        tape.record(out, [(a, lambda g: g * mask)])
    return out


def sigmoid(a, tape=None):
    """Elementwise logistic function, computed in overflow-safe branches."""
    x = a.data
    pos = x >= 0.0
    e = np.exp(np.where(pos, -x, x))  # exp of a non-positive number, never overflows
    val = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor._wrap(val, "sigmoid")
    if tape is not None:
        s = out.data
        tape.record(out, [(a, lambda g: g * (s * (1.0 - s)))])
    return out


def log_softmax(a, tape=None):
    """Row-wise log-softmax with max-subtraction stabilization."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor._wrap(shifted - lse, "log_softmax")
    if tape is not None:
        p = np.exp(out.data)
        tape.record(out, [(a, lambda g: g - p * g.sum(axis=1, keepdims=True))])
    return out


def clip(a, lo, hi, tape=None):
    """Clamp values into [lo, hi]; gradient passes only through unclamped entries."""
    inside = (a.data > lo) & (a.data < hi)
    out = Tensor._wrap(np.clip(a.data, lo, hi), "clip")
    if tape is not None:
        tape.record(out, [(a, lambda g: g * inside)])
    return out


def sum_squares(a, tape=None):
    """Sum of squared entries, as a 1x1 tensor."""
    out = Tensor._wrap(np.array([[float((a.data * a.data).sum())]]), "sum_squares")
    if tape is not None:
        ad = a.data
        tape.record(out, [(a, lambda g: (2.0 * g[0, 0]) * ad)])
    return out


def grad_check(f, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f(x, tape)` must return a 1x1 tensor and accept `tape=None` for a plain
    forward evaluation. Relative error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|); the max over
    entries is returned. Raises NonFiniteError if any probe point produces a
    non-finite value.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    tape = GradTape()
    analytic = tape.backward(f(point, tape)).wrt(point)
    base = point.data
    numeric = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            hi = base.copy()
            hi[i, j] += step
            lo = base.copy()
            lo[i, j] -= step
            # Tensor construction inside f raises NonFiniteError on bad values.
            numeric[i, j] = (f(Tensor(hi), None).item() - f(Tensor(lo), None).item()) / (2.0 * step)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())
