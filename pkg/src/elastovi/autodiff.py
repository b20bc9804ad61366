"""Reverse-mode automatic differentiation on a replayable operation tape.

A ``Tape`` records a straight-line program of array primitives while it is
being built (recording evaluates eagerly, so building an expression *is* the
first forward pass).  The recorded program can then be re-executed on fresh
input values with :meth:`Tape.forward`, and :meth:`Tape.backward` propagates
cotangents from the scalar output back to every declared input.

The primitive set is closed: elementwise arithmetic, exp/log/sqrt,
sigmoid/silu, dense matmul, constant-matrix matvec (dense or scipy sparse),
gather, reshape/transpose, full reduction, and log-determinant of a small SPD
matrix.  New physics composes from these; a genuinely new primitive needs a
hand-written adjoint plus a finite-difference test (see tests).

All values are float64 ndarrays.  Tapes are not shared between threads; use
one tape per worker and combine gradients by ordered summation.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tape",
    "Var",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "silu",
    "total",
    "matvec",
    "transpose",
    "reshape",
    "logdet_spd",
    "gather",
    "value_of",
]


def _as_array(v):
    return np.asarray(v, dtype=np.float64)


def _unbroadcast(cot, shape):
    """Reduce a broadcast cotangent back to the operand's original shape."""
    cot = np.asarray(cot, dtype=np.float64)
    if cot.shape == shape:
        return cot
    extra = cot.ndim - len(shape)
    if extra > 0:
        cot = cot.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (c, s) in enumerate(zip(cot.shape, shape)) if s == 1 and c != 1)
    if axes:
        cot = cot.sum(axis=axes, keepdims=True)
    return cot.reshape(shape)


class _Op:
    __slots__ = ("name", "out", "args", "aux", "apply", "vjp")

    def __init__(self, name, out, args, aux, apply, vjp):
        self.name = name
        self.out = out
        self.args = args
        self.aux = aux
        self.apply = apply
        self.vjp = vjp


class Var:
    """Handle to one tape slot; supports arithmetic that records new ops."""

    __slots__ = ("tape", "slot")
    __array_ufunc__ = None  # numpy must defer to our reflected operators

    def __init__(self, tape, slot):
        self.tape = tape
        self.slot = slot

    @property
    def value(self):
        return self.tape._values[self.slot]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape._binary("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape._binary("sub", self, other)

    def __rsub__(self, other):
        return self.tape._binary("sub", other, self)

    def __mul__(self, other):
        return self.tape._binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape._binary("div", self, other)

    def __rtruediv__(self, other):
        return self.tape._binary("div", other, self)

    def __neg__(self):
        return self.tape._unary("neg", self)

    def __pow__(self, p):
        if p == 2:
            return self.tape._unary("square", self)
        raise NotImplementedError("only **2 is recorded; compose other powers")

    def __matmul__(self, other):
        return self.tape._binary("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape._binary("matmul", other, self)


# ---------------------------------------------------------------------------
# primitive table: name -> (apply(aux, *vals), vjp(aux, cot, vals, out))
# vjp returns one cotangent per argument (None = not differentiable).


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _matmul_vjp(aux, cot, vals, out):
    a, b = vals
    if a.ndim == 2 and b.ndim == 2:
        return cot @ b.T, a.T @ cot
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(cot, b), a.T @ cot
    if a.ndim == 1 and b.ndim == 2:
        return b @ cot, np.outer(a, cot)
    raise ValueError("matmul supports 1D/2D operands only")


def _matvec_apply(aux, x):
    A, AT = aux
    if x.ndim == 1:
        return _as_array(A @ x)
    return _as_array((A @ x.T).T)


def _matvec_vjp(aux, cot, vals, out):
    A, AT = aux
    if vals[0].ndim == 1:
        return (_as_array(AT @ cot),)
    return (_as_array((AT @ cot.T).T),)


def _logdet_apply(aux, m):
    c = np.linalg.cholesky(m)
    return _as_array(2.0 * np.sum(np.log(np.diag(c))))


def _logdet_vjp(aux, cot, vals, out):
    inv = np.linalg.inv(vals[0])
    return (cot * 0.5 * (inv + inv.T),)


def _gather_vjp(aux, cot, vals, out):
    g = np.zeros_like(vals[0])
    np.add.at(g, aux, cot)
    return (g,)


_PRIMITIVES = {
    "add": (lambda aux, a, b: a + b,
            lambda aux, cot, vals, out: (_unbroadcast(cot, vals[0].shape),
                                         _unbroadcast(cot, vals[1].shape))),
    "sub": (lambda aux, a, b: a - b,
            lambda aux, cot, vals, out: (_unbroadcast(cot, vals[0].shape),
                                         _unbroadcast(-cot, vals[1].shape))),
    "mul": (lambda aux, a, b: a * b,
            lambda aux, cot, vals, out: (_unbroadcast(cot * vals[1], vals[0].shape),
                                         _unbroadcast(cot * vals[0], vals[1].shape))),
    "div": (lambda aux, a, b: a / b,
            lambda aux, cot, vals, out: (_unbroadcast(cot / vals[1], vals[0].shape),
                                         _unbroadcast(-cot * vals[0] / vals[1] ** 2,
                                                      vals[1].shape))),
    "neg": (lambda aux, a: -a,
            lambda aux, cot, vals, out: (-cot,)),
    "exp": (lambda aux, a: np.exp(a),
            lambda aux, cot, vals, out: (cot * out,)),
    "log": (lambda aux, a: np.log(a),
            lambda aux, cot, vals, out: (cot / vals[0],)),
    "sqrt": (lambda aux, a: np.sqrt(a),
             lambda aux, cot, vals, out: (cot * 0.5 / out,)),
    "square": (lambda aux, a: a * a,
               lambda aux, cot, vals, out: (cot * 2.0 * vals[0],)),
    "sigmoid": (lambda aux, a: _sigmoid(a),
                lambda aux, cot, vals, out: (cot * out * (1.0 - out),)),
    "silu": (lambda aux, a: a * _sigmoid(a),
             lambda aux, cot, vals, out: (
                 cot * (lambda s: s * (1.0 + vals[0] * (1.0 - s)))(_sigmoid(vals[0])),)),
    "matmul": (lambda aux, a, b: a @ b, _matmul_vjp),
    "transpose": (lambda aux, a: a.T.copy(),
                  lambda aux, cot, vals, out: (cot.T.copy(),)),
    "reshape": (lambda aux, a: a.reshape(aux),
                lambda aux, cot, vals, out: (cot.reshape(vals[0].shape),)),
    "total": (lambda aux, a: _as_array(a.sum()),
              lambda aux, cot, vals, out: (np.broadcast_to(cot, vals[0].shape).copy(),)),
    "matvec": (_matvec_apply, _matvec_vjp),
    "gather": (lambda aux, a: a[aux],
               _gather_vjp),
    "logdet_spd": (_logdet_apply, _logdet_vjp),
}


class Tape:
    """Single-assignment record of primitive array operations.

    Slots are written exactly once, in recording order, so the recorded
    list is already a topological order of the computation graph.
    """

    def __init__(self):
        self._values = []
        self._ops = []
        self._input_slots = []
        self._input_shapes = []
        self._const_slots = {}
        self._output = None
        self._grads = None

    # -- slot creation ------------------------------------------------------

    def _new_slot(self, value):
        self._values.append(_as_array(value))
        return len(self._values) - 1

    def input(self, value) -> Var:
        """Declare a differentiable input holding ``value``."""
        slot = self._new_slot(value)
        self._input_slots.append(slot)
        self._input_shapes.append(self._values[slot].shape)
        return Var(self, slot)

    def constant(self, value) -> Var:
        """Declare a non-differentiable leaf baked into the tape."""
        slot = self._new_slot(value)
        self._const_slots[slot] = self._values[slot]
        return Var(self, slot)

    def _lift(self, v) -> Var:
        return v if isinstance(v, Var) else self.constant(v)

    # -- recording ----------------------------------------------------------

    def _record(self, name, args, aux=None):
        apply, vjp = _PRIMITIVES[name]
        vals = tuple(self._values[a.slot] for a in args)
        out_val = apply(aux, *vals)
        slot = self._new_slot(out_val)
        self._ops.append(_Op(name, slot, tuple(a.slot for a in args), aux, apply, vjp))
        return Var(self, slot)

    def _binary(self, name, a, b):
        return self._record(name, (self._lift(a), self._lift(b)))

    def _unary(self, name, a, aux=None):
        return self._record(name, (self._lift(a),), aux)

    def mark_output(self, var: Var):
        self._output = var.slot

    @property
    def output_value(self):
        return self._values[self._output]

    # -- execution ----------------------------------------------------------

    def forward(self, inputs):
        """Replay the recorded program on new input values.

        ``inputs`` must match the declared inputs in count and shape.
        Returns the output value (scalar or array).
        """
        if len(inputs) != len(self._input_slots):
            raise ValueError(
                f"tape has {len(self._input_slots)} inputs, got {len(inputs)}")
        for slot, shape, v in zip(self._input_slots, self._input_shapes, inputs):
            v = _as_array(v)
            if v.shape != shape:
                raise ValueError(f"input slot {slot}: expected shape {shape}, got {v.shape}")
            self._values[slot] = v
        for op in self._ops:
            vals = (self._values[s] for s in op.args)
            self._values[op.out] = op.apply(op.aux, *vals)
        if self._output is None:
            raise ValueError("no output marked on tape")
        self._grads = None
        return self._values[self._output]

    def backward(self, seed=1.0):
        """Accumulate gradients of the scalar output w.r.t. every input.

        Returns one gradient array per declared input, in declaration order.
        """
        if self._output is None:
            raise ValueError("no output marked on tape")
        out_val = self._values[self._output]
        if out_val is None:
            raise ValueError("backward before forward")
        if out_val.size != 1:
            raise ValueError("backward requires a scalar output")
        grads = [None] * len(self._values)
        grads[self._output] = _as_array(seed).reshape(out_val.shape)
        for op in reversed(self._ops):
            cot = grads[op.out]
            if cot is None:
                continue
            vals = tuple(self._values[s] for s in op.args)
            arg_cots = op.vjp(op.aux, cot, vals, self._values[op.out])
            for slot, ac in zip(op.args, arg_cots):
                if ac is None:
                    continue
                if grads[slot] is None:
                    grads[slot] = ac
                else:
                    grads[slot] = grads[slot] + ac
        self._grads = grads
        out = []
        for slot, shape in zip(self._input_slots, self._input_shapes):
            g = grads[slot]
            out.append(np.zeros(shape) if g is None else g)
        return out

    # -- invariants ---------------------------------------------------------

    def validate(self):
        """Check single assignment and topological recording order."""
        written = set(self._input_slots) | set(self._const_slots)
        for op in self._ops:
            if op.out in written:
                raise AssertionError(f"slot {op.out} written twice")
            for a in op.args:
                if a not in written:
                    raise AssertionError(f"op {op.name} reads slot {a} before assignment")
            written.add(op.out)
        return True


# ---------------------------------------------------------------------------
# dispatching helpers: work on Var (record) or plain arrays (evaluate)


def value_of(a):
    """Current numeric value of a Var or array-like."""
    return a.value if isinstance(a, Var) else _as_array(a)


def _dispatch_unary(name, np_fn):
    def fn(a):
        if isinstance(a, Var):
            return a.tape._unary(name, a)
        return np_fn(_as_array(a))

    fn.__name__ = name
    return fn


exp = _dispatch_unary("exp", np.exp)
log = _dispatch_unary("log", np.log)
sqrt = _dispatch_unary("sqrt", np.sqrt)
square = _dispatch_unary("square", np.square)
sigmoid = _dispatch_unary("sigmoid", _sigmoid)
silu = _dispatch_unary("silu", lambda x: x * _sigmoid(x))
total = _dispatch_unary("total", lambda x: _as_array(x.sum()))


def transpose(a):
    if isinstance(a, Var):
        return a.tape._unary("transpose", a)
    return _as_array(a).T.copy()


def reshape(a, shape):
    if isinstance(a, Var):
        return a.tape._unary("reshape", a, aux=tuple(shape))
    return _as_array(a).reshape(shape)


def matvec(A, x):
    """Multiply by the constant matrix A: ``A @ x`` for 1D x, ``x @ A.T`` rowwise for 2D.

    A may be dense or scipy sparse; it is never differentiated.
    """
    if isinstance(x, Var):
        AT = A.T.tocsr() if sp.issparse(A) else A.T
        Ac = A.tocsr() if sp.issparse(A) else A
        return x.tape._unary("matvec", x, aux=(Ac, AT))
    x = _as_array(x)
    if x.ndim == 1:
        return _as_array(A @ x)
    return _as_array((A @ x.T).T)


def gather(a, idx):
    idx = np.asarray(idx)
    if isinstance(a, Var):
        return a.tape._unary("gather", a, aux=idx)
    return _as_array(a)[idx]


def logdet_spd(m):
    """log det of a symmetric positive definite matrix (Cholesky-based)."""
    if isinstance(m, Var):
        return m.tape._unary("logdet_spd", m)
    c = np.linalg.cholesky(_as_array(m))
    return float(2.0 * np.sum(np.log(np.diag(c))))
