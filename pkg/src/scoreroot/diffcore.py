"""Dense small-matrix linear algebra and a two-mode differentiation engine.

The engine records elementary numpy operations on a :class:`Tape` and
supports reverse-mode gradients with respect to recorded leaves.  Directional
(forward-mode) derivatives are expressed as :class:`Dual` pairs whose tangent
halves are themselves tape variables, so a reverse pass over a tangent output
yields exact parameter gradients of Jacobian-dependent scalars such as the
trace of an input Jacobian.

Networks plug in through a small protocol: ``net.bind(tape)`` returns an
object with a ``params`` list of leaf variables and an ``apply(x)`` method
that accepts a :class:`Var` or a :class:`Dual` and returns the same kind.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteGradient, SingularMatrix

PIVOT_RTOL = 1e-12


def solve_linear(a, b):
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    ``b`` may be a vector or a matrix of stacked right-hand sides.  Raises
    :class:`SingularMatrix` when a pivot falls below ``PIVOT_RTOL`` times the
    largest entry of the initial matrix.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    vector_rhs = b.ndim == 1
    rhs = b.reshape(n, -1)
    if rhs.shape[0] != n:
        raise ValueError(f"rhs length {rhs.shape[0]} does not match matrix size {n}")

    ref = np.max(np.abs(a)) if n else 0.0
    if ref == 0.0:
        raise SingularMatrix("zero matrix")
    aug = np.hstack([a, rhs])
    for k in range(n):
        p = k + int(np.argmax(np.abs(aug[k:, k])))
        if abs(aug[p, k]) <= PIVOT_RTOL * ref:
            raise SingularMatrix(f"pivot {aug[p, k]:.3e} below threshold at column {k}")
        if p != k:
            aug[[k, p]] = aug[[p, k]]
        factors = aug[k + 1:, k] / aug[k, k]
        aug[k + 1:, k:] -= np.outer(factors, aug[k, k:])
    x = np.empty_like(rhs)
    for k in range(n - 1, -1, -1):
        x[k] = (aug[k, n:] - aug[k, k + 1: n] @ x[k + 1:]) / aug[k, k]
    return x[:, 0] if vector_rhs else x


def invert(a):
    """Matrix inverse via :func:`solve_linear` against the identity."""
    a = np.asarray(a, dtype=float)
    return solve_linear(a, np.eye(a.shape[0]))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One recorded value on a tape."""

    __slots__ = ("tape", "value", "idx", "parents", "vjps", "requires_grad")

    def __init__(self, tape, value, idx, parents, vjps, requires_grad):
        self.tape = tape
        self.value = value
        self.idx = idx
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))


class Tape:
    """Ordered, replayable record of primitive operations.

    A tape is confined to a single thread and is discarded after each
    gradient evaluation; create a fresh one per training step.
    """

    def __init__(self):
        self._nodes = []

    def _record(self, value, parents=(), vjps=()):
        requires = any(p.requires_grad for p in parents)
        if not requires:
            parents, vjps = (), ()
        var = Var(self, np.asarray(value, dtype=float), len(self._nodes),
                  parents, vjps, requires)
        self._nodes.append(var)
        return var

    def constant(self, value):
        return self._record(value)

    def leaf(self, value):
        """A differentiable leaf (network parameter)."""
        var = self._record(value)
        var.requires_grad = True
        return var

    def gradient(self, output, wrt):
        """Reverse pass: gradients of a scalar ``output`` for each var in ``wrt``."""
        if output.value.size != 1:
            raise ValueError("gradient target must be scalar")
        adjoint = {output.idx: np.ones_like(output.value)}
        for node in reversed(self._nodes[: output.idx + 1]):
            if not node.parents:
                continue
            g = adjoint.pop(node.idx, None)
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                acc = adjoint.get(parent.idx)
                adjoint[parent.idx] = contrib if acc is None else acc + contrib
        return [adjoint.get(v.idx, np.zeros_like(v.value)) for v in wrt]


def add(a, b):
    return a.tape._record(
        a.value + b.value, (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b):
    return a.tape._record(
        a.value - b.value, (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b):
    return a.tape._record(
        a.value * b.value, (a, b),
        (lambda g: _unbroadcast(g * b.value, a.shape),
         lambda g: _unbroadcast(g * a.value, b.shape)))


def neg(a):
    return a.tape._record(-a.value, (a,), (lambda g: -g,))


def matmul(a, b):
    return a.tape._record(
        a.value @ b.value, (a, b),
        (lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape),
         lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)))


def transpose(a):
    """Swap the last two axes."""
    return a.tape._record(np.swapaxes(a.value, -1, -2), (a,),
                          (lambda g: np.swapaxes(g, -1, -2),))


def elu(a):
    x = a.value
    pos = x > 0.0
    deriv = np.where(pos, 1.0, np.exp(x))
    return a.tape._record(
        np.where(pos, x, np.expm1(x)), (a,), (lambda g: g * deriv,))


def elu_prime(a):
    """Derivative of ELU as a differentiable op (needed for tangent sweeps)."""
    x = a.value
    pos = x > 0.0
    second = np.where(pos, 0.0, np.exp(x))
    return a.tape._record(
        np.where(pos, 1.0, second), (a,), (lambda g: g * second,))


def vsum(a, axis=None, keepdims=False):
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()
    return a.tape._record(a.value.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def vmean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else a.value.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, a.shape).copy()
    return a.tape._record(a.value.mean(axis=axis, keepdims=keepdims), (a,), (vjp,))


def col(a, j):
    """Column ``j`` of a 2-d variable, kept as an ``(n, 1)`` slice."""
    def vjp(g):
        out = np.zeros(a.shape)
        out[:, j: j + 1] = g
        return out
    return a.tape._record(a.value[:, j: j + 1], (a,), (vjp,))


def square(a):
    return a.tape._record(a.value ** 2, (a,), (lambda g: g * (2.0 * a.value),))


def sweep(a, k):
    """Slice one forward-mode sweep out of a stacked tangent block."""
    def vjp(g):
        out = np.zeros(a.shape)
        out[k] = g
        return out
    return a.tape._record(a.value[k], (a,), (vjp,))


def trace_from_sweeps(a):
    """Per-row Jacobian trace from a stacked tangent of shape (d, n, d).

    Sweep ``j`` holds the derivative of every output against input coordinate
    ``j``, so the trace is the sum of the matched diagonal entries.
    """
    idx = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        out[idx, :, idx] = g
        return out
    return a.tape._record(a.value[idx, :, idx].sum(axis=0), (a,), (vjp,))


class Dual:
    """A primal/tangent pair for one forward-mode sweep.

    Both halves live on the same tape and have equal shapes, so reverse
    passes through tangent outputs see the full computation.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        if primal.shape != tangent.shape and tangent.value.shape[-1] != primal.value.shape[-1]:
            raise ValueError("primal and tangent widths differ")
        self.primal = primal
        self.tangent = tangent


def dual_matmul(x, w):
    if isinstance(x, Dual):
        return Dual(matmul(x.primal, w), matmul(x.tangent, w))
    return matmul(x, w)


def dual_add(x, b):
    if isinstance(x, Dual):
        return Dual(add(x.primal, b), x.tangent)
    return add(x, b)


def dual_elu(x):
    if isinstance(x, Dual):
        return Dual(elu(x.primal), mul(elu_prime(x.primal), x.tangent))
    return elu(x)


def dual_affine_in(x, shift, inv_scale):
    """Input standardization ``(x - shift) * inv_scale`` with tangent scaling."""
    if isinstance(x, Dual):
        return Dual(mul(sub(x.primal, shift), inv_scale), mul(x.tangent, inv_scale))
    return mul(sub(x, shift), inv_scale)


def grad_wrt_params(output, params):
    """Flat gradient of a recorded scalar with respect to leaf variables."""
    grads = output.tape.gradient(output, params)
    flat = np.concatenate([g.ravel() for g in grads]) if params else np.empty(0)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteGradient("non-finite entries in parameter gradient")
    return flat


def input_jacobian(net, at, block):
    """Jacobian of ``net`` outputs with respect to the ``block`` input coordinates.

    Runs one forward-mode sweep per coordinate in ``block`` (a range over the
    input vector) and stacks the tangents as columns.
    """
    at = np.asarray(at, dtype=float)
    tape = Tape()
    bound = net.bind(tape)
    x = tape.constant(at.reshape(1, -1))
    cols = []
    for j in block:
        seed = np.zeros((1, at.size))
        seed[0, j] = 1.0
        out = bound.apply(Dual(x, tape.constant(seed)))
        cols.append(out.tangent.value.reshape(-1))
    return np.stack(cols, axis=1)


def grad_of_jacobian_trace(net, at, block):
    """Gradient w.r.t. net parameters of ``tr`` of the block input Jacobian.

    The trace is assembled on-tape from the diagonal tangent entries of the
    forward sweeps, then differentiated by a single reverse pass.
    """
    at = np.asarray(at, dtype=float)
    block = list(block)
    tape = Tape()
    bound = net.bind(tape)
    x = tape.constant(at.reshape(1, -1))
    trace = None
    for out_idx, j in enumerate(block):
        seed = np.zeros((1, at.size))
        seed[0, j] = 1.0
        out = bound.apply(Dual(x, tape.constant(seed)))
        term = vsum(col(out.tangent, out_idx))
        trace = term if trace is None else add(trace, term)
    return grad_wrt_params(trace, bound.params)
