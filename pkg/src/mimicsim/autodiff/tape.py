"""Reverse-mode differentiation on an explicit tape.

Every recorded node keeps its operation kind, the indices of its parents and
one *local partial* per parent.  A partial is either

* an array, meaning the node is elementwise in that parent and the pullback is
  ``adjoint * partial`` summed back to the parent's shape, or
* a :class:`Pullback`, a stored linear map from the node adjoint to the parent
  adjoint (matrix products, reductions, indexing, simulator Jacobians), or
* ``None``, meaning no gradient flows to that parent (``stop_gradient``).

Nodes are appended in evaluation order, so parents always precede children and
a single reverse sweep yields exact derivatives.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Pullback",
    "TapeError",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "swish",
    "sqrt",
    "absolute",
    "minimum",
    "maximum",
    "clamp",
    "select",
    "concat",
    "stop_gradient",
    "matmul",
    "linear",
    "value_of",
]


class TapeError(RuntimeError):
    pass


class Pullback:
    """Linear pullback ``fn(adjoint) -> parent adjoint`` with its saved arrays."""

    __slots__ = ("fn", "saved")

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], *saved: np.ndarray):
        self.fn = fn
        self.saved = saved

    def __call__(self, g):
        return self.fn(g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of a differentiable computation."""

    def __init__(self):
        self._ops: list[str] = []
        self._parents: list[tuple[int, ...]] = []
        self._partials: list[tuple] = []
        self._values: list[np.ndarray] = []
        self._leaves: list[int] = []
        # test hook: called as hook(node_index, op, adjoint) -> adjoint
        self.adjoint_hook: Callable | None = None

    def __len__(self):
        return len(self._values)

    @property
    def leaves(self) -> list[int]:
        return list(self._leaves)

    def op(self, index: int) -> str:
        return self._ops[index]

    def value(self, index: int) -> np.ndarray:
        return self._values[index]

    def _append(self, op, parents, partials, value) -> "Var":
        self._ops.append(op)
        self._parents.append(parents)
        self._partials.append(partials)
        self._values.append(value)
        return Var(self, len(self._values) - 1)

    def leaf(self, value) -> "Var":
        """Register a differentiable input."""
        var = self._append("leaf", (), (), np.array(value, dtype=float))
        self._leaves.append(var.index)
        return var

    def constant(self, value) -> "Var":
        return self._append("const", (), (), np.asarray(value, dtype=float))

    def record(self, op: str, inputs: Sequence["Var"], value, partials: Sequence) -> "Var":
        if len(inputs) != len(partials):
            raise TapeError(f"{op}: {len(inputs)} inputs but {len(partials)} partials")
        for v in inputs:
            if not isinstance(v, Var):
                raise TapeError(f"{op}: inputs must be Vars, got {type(v).__name__}")
            if v.tape is not self:
                raise TapeError(f"{op}: input belongs to a different tape")
        return self._append(op, tuple(v.index for v in inputs), tuple(partials), np.asarray(value, dtype=float))

    def backward(
        self,
        output: "Var",
        leaves: Iterable["Var"] | None = None,
        blocked: Iterable[int] = (),
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Adjoints of ``output`` with respect to ``leaves`` (default: all registered).

        Nodes listed in ``blocked`` receive adjoints but do not pass them on,
        which is how truncated backpropagation cuts the state path.
        """
        if not self._values:
            raise TapeError("backward on an empty tape")
        if output.tape is not self:
            raise TapeError("output belongs to a different tape")
        out = output.index
        if seed is None:
            if self._values[out].size != 1:
                raise TapeError("backward needs a scalar output or an explicit seed")
            seed = np.ones_like(self._values[out])
        adj: list = [None] * (out + 1)
        adj[out] = np.asarray(seed, dtype=float)
        blocked = frozenset(blocked)
        hook = self.adjoint_hook
        parents, partials, values = self._parents, self._partials, self._values
        for i in range(out, -1, -1):
            g = adj[i]
            if g is None or not parents[i] or i in blocked:
                continue
            if hook is not None:
                g = hook(i, self._ops[i], g)
            for p, part in zip(parents[i], partials[i]):
                if part is None:
                    continue
                if isinstance(part, Pullback):
                    c = part(g)
                else:
                    c = _unbroadcast(g * part, values[p].shape)
                adj[p] = c if adj[p] is None else adj[p] + c
        idx = self._leaves if leaves is None else [v.index for v in leaves]
        grads = []
        for j in idx:
            a = adj[j] if j <= out else None
            grads.append(np.zeros_like(self._values[j]) if a is None else np.array(a, dtype=float))
        return grads

    def nbytes(self) -> int:
        """Bytes held by stored values and local partials."""
        total = sum(v.nbytes for v in self._values)
        for parts in self._partials:
            for p in parts:
                if isinstance(p, Pullback):
                    total += sum(np.asarray(s).nbytes for s in p.saved)
                elif p is not None:
                    total += np.asarray(p).nbytes
        return total


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.op(self.index)}, shape={self.shape})"

    def __add__(self, o):
        return _binary("add", self, o, lambda a, b: a + b, lambda a, b, r: 1.0, lambda a, b, r: 1.0)

    def __radd__(self, o):
        return _binary("add", o, self, lambda a, b: a + b, lambda a, b, r: 1.0, lambda a, b, r: 1.0)

    def __sub__(self, o):
        return _binary("sub", self, o, lambda a, b: a - b, lambda a, b, r: 1.0, lambda a, b, r: -1.0)

    def __rsub__(self, o):
        return _binary("sub", o, self, lambda a, b: a - b, lambda a, b, r: 1.0, lambda a, b, r: -1.0)

    def __mul__(self, o):
        return _binary("mul", self, o, lambda a, b: a * b, lambda a, b, r: b, lambda a, b, r: a)

    def __rmul__(self, o):
        return _binary("mul", o, self, lambda a, b: a * b, lambda a, b, r: b, lambda a, b, r: a)

    def __truediv__(self, o):
        return _binary("div", self, o, lambda a, b: a / b, lambda a, b, r: 1.0 / b, lambda a, b, r: -r / b)

    def __rtruediv__(self, o):
        return _binary("div", o, self, lambda a, b: a / b, lambda a, b, r: 1.0 / b, lambda a, b, r: -r / b)

    def __neg__(self):
        v = self.value
        return self.tape.record("neg", (self,), -v, (np.full_like(v, -1.0),))

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TapeError("pow supports constant exponents only")
        v = self.value
        p = float(p)
        return self.tape.record("pow", (self,), v**p, (p * v ** (p - 1.0),))

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        v = self.value
        shape = v.shape
        basic = _is_basic(idx)

        def pull(g):
            z = np.zeros(shape)
            if basic:
                z[idx] += g
            else:
                np.add.at(z, idx, g)
            return z

        return self.tape.record("index", (self,), v[idx], (Pullback(pull),))

    def sum(self, axis=None):
        v = self.value
        shape = v.shape
        out = v.sum(axis=axis)

        def pull(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return self.tape.record("sum", (self,), out, (Pullback(pull),))

    def mean(self, axis=None):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis) * (1.0 / float(n))

    def reshape(self, *shape):
        v = self.value
        old = v.shape
        out = v.reshape(*shape)
        return self.tape.record("reshape", (self,), out, (Pullback(lambda g: g.reshape(old)),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands belong to different tapes")
    return tape


def _binary(op, a, b, f, da, db):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    r = f(av, bv)
    inputs, parts = [], []
    for x, d in ((a, da), (b, db)):
        if isinstance(x, Var):
            inputs.append(x)
            parts.append(np.broadcast_to(np.asarray(d(av, bv, r), dtype=float), np.shape(r)))
    return tape.record(op, inputs, r, parts)


def _unary(op, x, f, df):
    if not isinstance(x, Var):
        return f(np.asarray(x, dtype=float))
    v = x.value
    r = f(v)
    return x.tape.record(op, (x,), r, (np.asarray(df(v, r), dtype=float),))


def _sig(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def exp(x):
    return _unary("exp", x, np.exp, lambda v, r: r)


def log(x):
    return _unary("log", x, np.log, lambda v, r: 1.0 / v)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda v, r: 1.0 - r * r)


def sigmoid(x):
    return _unary("sigmoid", x, _sig, lambda v, r: r * (1.0 - r))


def swish(x):
    """``x * sigmoid(x)``."""

    def d(v, r):
        s = _sig(v)
        return s + v * s * (1.0 - s)

    return _unary("swish", x, lambda v: v * _sig(v), d)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda v, r: 0.5 / r)


def absolute(x):
    # subgradient 0 at 0
    return _unary("abs", x, np.abs, lambda v, r: np.sign(v))


def minimum(a, b):
    """Elementwise min; a tie routes the gradient to ``a``."""
    if _tape_of(a, b) is None:
        return np.minimum(a, b)
    return _binary(
        "min", a, b, np.minimum,
        lambda av, bv, r: (av <= bv).astype(float),
        lambda av, bv, r: (av > bv).astype(float),
    )


def maximum(a, b):
    """Elementwise max; a tie routes the gradient to ``a``."""
    if _tape_of(a, b) is None:
        return np.maximum(a, b)
    return _binary(
        "max", a, b, np.maximum,
        lambda av, bv, r: (av >= bv).astype(float),
        lambda av, bv, r: (av < bv).astype(float),
    )


def clamp(x, lo=-np.inf, hi=np.inf):
    """Clip to ``[lo, hi]``; zero gradient strictly outside the bounds."""
    return _unary("clamp", x, lambda v: np.clip(v, lo, hi), lambda v, r: ((v >= lo) & (v <= hi)).astype(float))


def select(mask, a, b):
    """``a`` where ``mask`` else ``b``; gradient flows only through the taken branch."""
    tape = _tape_of(a, b)
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    r = np.where(mask, av, bv)
    if tape is None:
        return r
    inputs, parts = [], []
    if isinstance(a, Var):
        inputs.append(a)
        parts.append(np.broadcast_to(mask, r.shape).astype(float))
    if isinstance(b, Var):
        inputs.append(b)
        parts.append(np.broadcast_to(~mask, r.shape).astype(float))
    return tape.record("select", inputs, r, parts)


def stop_gradient(x):
    """Same value, but no adjoint flows back through this node."""
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float)
    return x.tape.record("stop_gradient", (x,), x.value, (None,))


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    r = av @ bv
    if tape is None:
        return r
    # vectors are promoted to matrices as numpy does, so the pullbacks see 2-d operands
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    gshape = (a2 @ b2).shape
    inputs, parts = [], []
    if isinstance(a, Var):
        inputs.append(a)
        parts.append(Pullback(lambda g: _unbroadcast(np.reshape(g, gshape) @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape), bv))
    if isinstance(b, Var):
        inputs.append(b)
        parts.append(Pullback(lambda g: _unbroadcast(np.swapaxes(a2, -1, -2) @ np.reshape(g, gshape), b2.shape).reshape(bv.shape), av))
    return tape.record("matmul", inputs, r, parts)


def concat(xs: Sequence, axis: int = -1):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    r = np.concatenate(vals, axis=axis)
    if tape is None:
        return r
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    inputs, parts = [], []
    for k, x in enumerate(xs):
        if isinstance(x, Var):
            inputs.append(x)
            parts.append(Pullback(lambda g, k=k: np.split(g, bounds, axis=axis)[k]))
    return tape.record("concat", inputs, r, parts)


def linear(op: str, inputs: Sequence[Var], value, jacobians: Sequence[np.ndarray]):
    """Record a batched node ``y[b] = f(x1[b], x2[b], ...)`` given its Jacobians.

    ``jacobians[i]`` has shape ``(B, y[b].size, xi[b].size)``.  This is how a
    simulator transition enters the tape: its local partials are exactly
    ``dT/ds`` and ``dT/da``.
    """
    value = np.asarray(value, dtype=float)
    batch = value.shape[0]
    parts = []
    for x, jac in zip(inputs, jacobians):
        shape = x.value.shape

        def pull(g, jac=jac, shape=shape):
            return np.einsum("bo,boi->bi", g.reshape(batch, -1), jac).reshape(shape)

        parts.append(Pullback(pull, jac))
    return inputs[0].tape.record(op, list(inputs), value, parts)
