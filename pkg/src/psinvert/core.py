"""Vector helpers and a small define-by-run reverse-mode autodiff engine.

Every node on a :class:`Tape` holds a floating numpy array (a scalar is a
0-d array).  Leaves keep float32/float64 as given, and operations never
upcast, so a graph built on float32 leaves runs entirely in float32.  Operations are recorded in topological order as they execute,
and :meth:`Tape.backward` performs a single reverse sweep that accumulates
adjoints across fan-out.

The math helpers at the bottom of this module (``exp``, ``relu``,
``normalize`` ...) accept either plain numbers/arrays or :class:`Var` and
dispatch accordingly, so the shading code is written once and used both
for plain evaluation and for gradient computation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVector, ForeignVar, NonFinite

DEGENERATE_NORM = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self._vjps: list[Callable | None] = []
        # node index -> array whose sign pattern decides the active branch
        self._kinks: list[tuple[int, np.ndarray]] = []
        self.last_sweep_visits = 0

    def __len__(self):
        return len(self.values)

    def _push(self, op, value, parents=(), vjp=None) -> "Var":
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.values.append(value)
        self._vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> "Var":
        """Register an input that gradients will be reported for."""
        return self._push("leaf", _as_float(value).copy())

    def _record_kink(self, index: int, arg: np.ndarray):
        self._kinks.append((index, arg))

    def kink_signature(self) -> list[np.ndarray]:
        """Sign pattern of every max(., 0) / abs argument recorded so far."""
        return [np.sign(a) for _, a in self._kinks]

    def backward(self, output: "Var") -> "Gradients":
        if not isinstance(output, Var) or output.tape is not self:
            raise ForeignVar("output does not belong to this tape")
        adj: list[np.ndarray | None] = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(self.values[output.index])
        visits = 0
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            visits += 1
            vjp = self._vjps[i]
            if vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = np.array(gp, copy=True)
                else:
                    adj[p] = adj[p] + gp
        self.last_sweep_visits = visits
        return Gradients(self, adj)


class Gradients:
    """Adjoints from one reverse sweep, indexed by :class:`Var`."""

    def __init__(self, tape: Tape, adj):
        self._tape = tape
        self._adj = adj

    def __getitem__(self, var: "Var") -> np.ndarray:
        if var.tape is not self._tape:
            raise ForeignVar("variable belongs to another tape")
        g = self._adj[var.index] if var.index < len(self._adj) else None
        if g is None:
            return np.zeros_like(var.value)
        return g


def _as_float(x) -> np.ndarray:
    a = np.asarray(x)
    return a if a.dtype in (np.float32, np.float64) else a.astype(np.float64)


def _lift(x):
    if isinstance(x, Var):
        return x.value
    # python scalars stay weakly typed so they never promote float32 operands
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    return _as_float(x)


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(#{self.index}, {self.value!r})"

    def __float__(self):
        return float(self.value)

    # -- arithmetic --------------------------------------------------
    def _binary(self, other, op, fwd, da, db, reverse=False):
        a, b = (other, self) if reverse else (self, other)
        av, bv = _lift(a), _lift(b)
        out = fwd(av, bv)
        parents, rules = [], []
        if isinstance(a, Var):
            parents.append(a.index)
            rules.append(lambda g: _unbroadcast(da(g, av, bv, out), av.shape))
        if isinstance(b, Var):
            parents.append(b.index)
            rules.append(lambda g: _unbroadcast(db(g, av, bv, out), bv.shape))
        _check_same_tape(self, other)
        return self.tape._push(op, out, parents, lambda g: [r(g) for r in rules])

    def __add__(self, o):
        return self._binary(o, "add", np.add, lambda g, a, b, y: g, lambda g, a, b, y: g)

    def __radd__(self, o):
        return self._binary(o, "add", np.add, lambda g, a, b, y: g, lambda g, a, b, y: g, reverse=True)

    def __sub__(self, o):
        return self._binary(o, "sub", np.subtract, lambda g, a, b, y: g, lambda g, a, b, y: -g)

    def __rsub__(self, o):
        return self._binary(o, "sub", np.subtract, lambda g, a, b, y: g, lambda g, a, b, y: -g, reverse=True)

    def __mul__(self, o):
        return self._binary(o, "mul", np.multiply, lambda g, a, b, y: g * b, lambda g, a, b, y: g * a)

    def __rmul__(self, o):
        return self._binary(o, "mul", np.multiply, lambda g, a, b, y: g * b, lambda g, a, b, y: g * a, reverse=True)

    def __truediv__(self, o):
        return self._binary(o, "div", np.divide, lambda g, a, b, y: g / b, lambda g, a, b, y: -g * y / b)

    def __rtruediv__(self, o):
        return self._binary(o, "div", np.divide, lambda g, a, b, y: g / b, lambda g, a, b, y: -g * y / b, reverse=True)

    def __neg__(self):
        return self.tape._push("neg", -self.value, (self.index,), lambda g: [-g])

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        x = self.value
        return self.tape._push("pow", x**p, (self.index,), lambda g: [g * p * x ** (p - 1)])

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    # -- structure ---------------------------------------------------
    def __getitem__(self, idx):
        x = self.value
        out = x[idx]

        def vjp(g):
            full = np.zeros_like(x)
            np.add.at(full, idx, g)
            return [full]

        return self.tape._push("index", out, (self.index,), vjp)

    def reshape(self, *shape):
        x = self.value
        return self.tape._push("reshape", x.reshape(*shape), (self.index,), lambda g: [g.reshape(x.shape)])

    @property
    def T(self):
        return self.tape._push("transpose", self.value.T, (self.index,), lambda g: [g.T])

    def sum(self, axis=None, keepdims=False):
        x = self.value
        out = x.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, x.shape)]

        return self.tape._push("sum", out, (self.index,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _check_same_tape(a, b):
    if isinstance(a, Var) and isinstance(b, Var) and a.tape is not b.tape:
        raise ForeignVar("operands live on different tapes")


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ForeignVar("operands live on different tapes")
            tape = x.tape
    return tape


# ---------------------------------------------------------------------------
# dispatching math helpers


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _as_float(_lift(a)), _as_float(_lift(b))
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = av @ bv
    if tape is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        rules.append(lambda g: g @ bv.T)
    if isinstance(b, Var):
        parents.append(b.index)
        rules.append(lambda g: av.T @ g)
    return tape._push("matmul", out, parents, lambda g: [r(g) for r in rules])


def _unary(x, op, fwd, deriv):
    if not isinstance(x, Var):
        return fwd(_as_float(x))
    xv = x.value
    out = fwd(xv)
    return x.tape._push(op, out, (x.index,), lambda g: [g * deriv(xv, out)])


def exp(x):
    return _unary(x, "exp", np.exp, lambda x, y: y)


def log(x):
    return _unary(x, "log", np.log, lambda x, y: 1.0 / x)


def sqrt(x):
    return _unary(x, "sqrt", np.sqrt, lambda x, y: 0.5 / y)


def softplus(x):
    """ln(1 + exp(x)), overflow safe."""
    return _unary(x, "softplus", lambda v: np.logaddexp(0.0, v), lambda x, y: 0.5 * (1.0 + np.tanh(0.5 * x)))


def relu(x):
    """max(x, 0); the derivative at exactly 0 is taken to be 0."""
    out = _unary(x, "relu", lambda v: np.maximum(v, 0.0), lambda x, y: (x > 0).astype(x.dtype))
    if isinstance(out, Var):
        out.tape._record_kink(out.index, x.value)
    return out


def abs_(x):
    out = _unary(x, "abs", np.abs, lambda x, y: np.sign(x))
    if isinstance(out, Var):
        out.tape._record_kink(out.index, x.value)
    return out


def dot(a, b, axis=-1):
    """Inner product along ``axis`` (broadcasting over the rest)."""
    tape = _tape_of(a, b)
    av, bv = _lift(a), _lift(b)
    out = np.sum(av * bv, axis=axis)
    if tape is None:
        return out
    parents, rules = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        rules.append(lambda g: _unbroadcast(np.expand_dims(g, axis) * bv, av.shape))
    if isinstance(b, Var):
        parents.append(b.index)
        rules.append(lambda g: _unbroadcast(np.expand_dims(g, axis) * av, bv.shape))
    return tape._push("dot", out, parents, lambda g: [r(g) for r in rules])


def normalize(v, axis=-1, eps=DEGENERATE_NORM):
    """Scale ``v`` to unit length along ``axis``.

    Raises DegenerateVector when any norm is <= ``eps``.
    """
    vv = _as_float(_lift(v))
    norm = np.sqrt(np.sum(vv * vv, axis=axis, keepdims=True))
    if not np.all(np.isfinite(vv)):
        raise NonFinite("cannot normalize a non-finite vector")
    if np.any(norm <= eps):
        raise DegenerateVector(f"vector norm {norm.min():.3g} <= {eps:g}")
    out = vv / norm
    if not isinstance(v, Var):
        return out

    def vjp(g):
        return [(g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm]

    return v.tape._push("normalize", out, (v.index,), vjp)


def concatenate(xs: Sequence, axis=-1):
    tape = _tape_of(*xs)
    vals = [_as_float(_lift(x)) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    idx = [i for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return [parts[i] for i in idx]

    return tape._push("concat", out, [xs[i].index for i in idx], vjp)


def value_of(x) -> np.ndarray:
    return _as_float(_lift(x))


def vec3(x, y, z) -> np.ndarray:
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFinite("Vec3 components must be finite")
    return v


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tape, Var], Var], x, eps: float = 1e-5):
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f(tape, x_var)`` must build a scalar on ``tape``.  Returns the max
    over coordinates of ``|g_ad - g_fd| / max(floor, |g_ad| + |g_fd|)``, or
    ``None`` if a finite-difference probe lands on a different side of any
    max(., 0)/abs kink than the base point (such points are not checked).

    ``floor`` is 1e-8 or 1e4 times the round-off of the central difference
    (machine eps * max(|f|, 1) / eps), whichever is larger: below that scale the
    finite difference carries no relative information.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x)
    out = f(tape, xv)
    if not np.all(np.isfinite(out.value)):
        raise NonFinite("function value is not finite")
    g_ad = tape.backward(out)[xv]
    base_sig = tape.kink_signature()

    def probe(xp):
        t = Tape()
        val = f(t, t.leaf(xp)).value
        if not np.all(np.isfinite(val)):
            raise NonFinite("function value is not finite")
        sig = t.kink_signature()
        same = len(sig) == len(base_sig) and all(np.array_equal(a, b) for a, b in zip(sig, base_sig))
        return float(np.sum(val)), same

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, ok_p = probe(xp.reshape(x.shape))
        fm, ok_m = probe(xm.reshape(x.shape))
        if not (ok_p and ok_m):
            return None
        g_fd = (fp - fm) / (2 * eps)
        ga = float(g_ad.reshape(-1)[i])
        floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * max(abs(fp), abs(fm), 1.0) / eps)
        err = abs(ga - g_fd) / max(floor, abs(ga) + abs(g_fd))
        worst = max(worst, err)
    return worst


def rotate_random(directions, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate each row about a uniformly random axis by an angle in [0, max_deg].

    The angle between a row and its image never exceeds ``max_deg``.
    """
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    axis = normalize(rng.normal(size=d.shape))
    theta = np.radians(rng.uniform(0.0, max_deg, size=(len(d), 1)))
    c, s = np.cos(theta), np.sin(theta)
    # Rodrigues' rotation formula
    return d * c + np.cross(axis, d) * s + axis * np.sum(axis * d, axis=1, keepdims=True) * (1 - c)
