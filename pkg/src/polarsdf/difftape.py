"""Reverse-mode automatic differentiation over numpy-valued computation graphs.

Nodes hold ndarray values (a scalar is a 0-d array), so the same tape serves
both unit-test scale (single scalars) and full ray batches.  Backward is a
single reverse sweep in insertion order with deterministic accumulation, so
repeated runs of an identical program give bitwise-identical gradients.

Output buffers come from a shape-keyed pool: a training loop that discards a
tape per iteration calls ``tape.release()`` and the next iteration reuses the
same memory, avoiding the page-fault churn of reallocating hundreds of
megabytes per step.  Pooling never changes values, only where they live.

Subgradient conventions (documented and tested):
  * ``minimum``/``maximum`` propagate to the first operand on ties,
  * ``absolute`` has derivative 0 at 0, ``sqrt`` likewise at 0,
  * ``clamp`` has zero derivative strictly outside [lo, hi].
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DomainError, TapeGenerationError

_generation_counter = itertools.count()

_POOL: dict[tuple, list] = {}
_POOL_MAX_PER_SHAPE = 64
_POOL_MAX_BYTES = 1_200_000_000
_pool_bytes = 0


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.asarray(g).reshape(shape)


def _value_of(x):
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Var:
    """A value recorded on a tape.  Supports standard arithmetic operators."""

    __slots__ = ("tape", "idx", "value")

    # defer ndarray <op> Var to the reflected Var operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", idx: int, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, tape=self.tape)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self, tape=self.tape)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powc(self, p)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only computation record; insertion order is topological order."""

    def __init__(self):
        self.generation = next(_generation_counter)
        self._parents: list[tuple] = []
        self._backs: list = []
        self._params: dict[str, int] = {}
        self._param_shapes: dict[int, tuple] = {}
        self._owned: list = []

    def __len__(self):
        return len(self._parents)

    def alloc(self, shape) -> np.ndarray:
        """Pooled uninitialized float64 buffer; every op overwrites it fully."""
        global _pool_bytes
        shape = tuple(shape)
        lst = _POOL.get(shape)
        if lst:
            buf = lst.pop()
            _pool_bytes -= buf.nbytes
        else:
            buf = np.empty(shape)
        self._owned.append(buf)
        return buf

    def release(self):
        """Return pooled buffers and drop the graph.  Vars from this tape must
        not be used afterwards (values may be overwritten by later tapes).
        The pool is byte-capped; once full it is cleared wholesale, so shapes
        that never repeat (variable shading counts) cannot accumulate."""
        global _pool_bytes
        for buf in self._owned:
            lst = _POOL.setdefault(buf.shape, [])
            if len(lst) < _POOL_MAX_PER_SHAPE:
                lst.append(buf)
                _pool_bytes += buf.nbytes
        self._owned.clear()
        self._parents.clear()
        self._backs.clear()
        self._params.clear()
        if _pool_bytes > _POOL_MAX_BYTES:
            _POOL.clear()
            _pool_bytes = 0

    def _emit(self, value, parents: tuple, back) -> Var:
        self._parents.append(parents)
        self._backs.append(back)
        return Var(self, len(self._parents) - 1, value)

    def param(self, name: str, value) -> Var:
        """Register a named leaf parameter; returns its Var."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        v = self._emit(arr, (), None)
        self._params[name] = v.idx
        self._param_shapes[v.idx] = arr.shape
        return v

    def leaf(self, value) -> Var:
        """Anonymous leaf; receives but does not report a gradient."""
        return self._emit(np.asarray(value, dtype=np.float64), (), None)

    def check(self, *vars_):
        for v in vars_:
            if isinstance(v, Var) and v.tape is not self:
                raise TapeGenerationError(
                    f"Var from tape generation {v.tape.generation} used with "
                    f"generation {self.generation}")

    def backward(self, out: Var) -> dict[str, np.ndarray]:
        """Reverse accumulation from scalar `out` to every registered parameter.

        Parameters not reached by the sweep get an all-zero gradient.
        """
        if out.tape is not self:
            raise TapeGenerationError(
                f"output Var belongs to tape generation {out.tape.generation}, "
                f"not {self.generation}")
        if np.size(out.value) != 1:
            raise ValueError("backward expects a scalar output")
        grads: list = [None] * (out.idx + 1)
        owned: list = [False] * (out.idx + 1)
        grads[out.idx] = np.ones(np.shape(out.value))
        leaf_grads: dict[int, np.ndarray] = {}
        for i in range(out.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            back = self._backs[i]
            if back is None:
                leaf_grads[i] = g
            else:
                for pid, gp in back(g):
                    if grads[pid] is None:
                        # borrowed reference: may alias another node's gradient
                        grads[pid] = gp
                    elif owned[pid]:
                        grads[pid] += gp
                    else:
                        grads[pid] = grads[pid] + gp
                        owned[pid] = True
            grads[i] = None
        result = {}
        for name, idx in self._params.items():
            gv = leaf_grads.get(idx) if idx <= out.idx else None
            result[name] = np.zeros(self._param_shapes[idx]) if gv is None else np.asarray(gv)
        return result


# ---------------------------------------------------------------------------
# op constructors


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def _binary(a, b, ufunc, back_a, back_b, tape=None):
    t = tape if tape is not None else _tape_of(a, b)
    t.check(a, b)
    av, bv = _value_of(a), _value_of(b)
    out = ufunc(av, bv, out=t.alloc(np.broadcast_shapes(np.shape(av), np.shape(bv))))
    slots = []
    if isinstance(a, Var):
        slots.append((a.idx, "a", np.shape(av)))
    if isinstance(b, Var):
        slots.append((b.idx, "b", np.shape(bv)))

    def back(g, _av=av, _bv=bv, _slots=tuple(slots)):
        outs = []
        for pid, which, shape in _slots:
            fn = back_a if which == "a" else back_b
            outs.append((pid, _unbroadcast(fn(g, _av, _bv), shape)))
        return outs

    return t._emit(out, tuple(pid for pid, _, _ in slots), back)


def _unary(a: Var, ufunc, back_fn):
    av = a.value
    out = ufunc(av, out=a.tape.alloc(np.shape(av)))

    def back(g, _av=av, _out=out):
        return [(a.idx, back_fn(g, _av, _out))]

    return a.tape._emit(out, (a.idx,), back)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b, tape=None):
    return _binary(a, b, np.subtract,
                   lambda g, x, y: g, lambda g, x, y: -g, tape=tape)


def mul(a, b):
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b, tape=None):
    bv = _value_of(b)
    if np.any(bv == 0.0):
        raise DomainError("div", "division by zero")
    return _binary(a, b, np.divide,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y), tape=tape)


def neg(a: Var):
    return _unary(a, np.negative, lambda g, x, o: -g)


def powc(a: Var, p: float):
    """a ** p for a constant exponent p."""
    av = a.value
    if p != int(p) and np.any(av < 0.0):
        raise DomainError("pow", f"negative base with non-integer exponent {p}")
    if p < 0 and np.any(av == 0.0):
        raise DomainError("pow", f"zero base with negative exponent {p}")
    return _unary(a, lambda x, out=None: np.power(x, p, out=out),
                  lambda g, x, o: g * p * x ** (p - 1))


def exp(a: Var):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a: Var):
    if np.any(a.value <= 0.0):
        raise DomainError("log", f"non-positive operand (min {np.min(a.value)})")
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a: Var):
    """Square root; the (unbounded) derivative at 0 is replaced by 0."""
    if np.any(a.value < 0.0):
        raise DomainError("sqrt", f"negative operand (min {np.min(a.value)})")
    return _unary(a, np.sqrt,
                  lambda g, x, o: np.where(o > 0.0, g / (2.0 * np.where(o > 0.0, o, 1.0)), 0.0))


def sin(a: Var):
    return _unary(a, np.sin, lambda g, x, o: g * np.cos(x))


def cos(a: Var):
    return _unary(a, np.cos, lambda g, x, o: -g * np.sin(x))


def atan2(y, x):
    t = _tape_of(y, x)
    yv, xv = _value_of(y), _value_of(x)
    if np.any((yv == 0.0) & (xv == 0.0)):
        raise DomainError("atan2", "both operands zero")
    return _binary(y, x, np.arctan2,
                   lambda g, yy, xx: g * xx / (xx * xx + yy * yy),
                   lambda g, yy, xx: -g * yy / (xx * xx + yy * yy), tape=t)


def minimum(a, b):
    """Elementwise min; ties propagate the gradient to the first operand."""
    return _binary(a, b, np.minimum,
                   lambda g, x, y: g * (x <= y),
                   lambda g, x, y: g * (x > y))


def maximum(a, b):
    """Elementwise max; ties propagate the gradient to the first operand."""
    return _binary(a, b, np.maximum,
                   lambda g, x, y: g * (x >= y),
                   lambda g, x, y: g * (x < y))


def clamp(a: Var, lo: float, hi: float):
    """Clamp to [lo, hi]; zero gradient strictly outside the interval."""
    return _unary(a, lambda x, out=None: np.clip(x, lo, hi, out=out),
                  lambda g, x, o: g * ((x >= lo) & (x <= hi)))


def sigmoid(a: Var):
    return _unary(a, expit, lambda g, x, o: g * o * (1.0 - o))


def absolute(a: Var):
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x))


def vsum(a: Var, axis=None, keepdims=False):
    av = a.value

    def back(g, _shape=np.shape(av)):
        if axis is None:
            return [(a.idx, np.broadcast_to(g, _shape))]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a.idx, np.broadcast_to(gg, _shape))]

    return a.tape._emit(np.sum(av, axis=axis, keepdims=keepdims), (a.idx,), back)


def vmean(a: Var, axis=None, keepdims=False):
    n = np.size(a.value) if axis is None else np.shape(a.value)[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum_last(a: Var):
    out = np.cumsum(a.value, axis=-1, out=a.tape.alloc(np.shape(a.value)))

    def back(g):
        return [(a.idx, np.flip(np.cumsum(np.flip(g, -1), -1), -1))]

    return a.tape._emit(out, (a.idx,), back)


def shift_right_last(a: Var):
    """Prepend a zero column along the last axis, dropping the final column."""
    av = a.value
    out = a.tape.alloc(np.shape(av))
    out[..., 0] = 0.0
    out[..., 1:] = av[..., :-1]

    def back(g):
        gp = np.concatenate([g[..., 1:], np.zeros(g.shape[:-1] + (1,))], axis=-1)
        return [(a.idx, gp)]

    return a.tape._emit(out, (a.idx,), back)


def slice_last(a: Var, start: int, stop: int):
    av = a.value

    def back(g, _shape=np.shape(av)):
        z = np.zeros(_shape)
        z[..., start:stop] = g
        return [(a.idx, z)]

    return a.tape._emit(av[..., start:stop], (a.idx,), back)


def reshape(a: Var, shape):
    av = a.value

    def back(g, _shape=np.shape(av)):
        return [(a.idx, np.asarray(g).reshape(_shape))]

    return a.tape._emit(np.reshape(av, shape), (a.idx,), back)


def gather(a: Var, idx: np.ndarray):
    """Index a Var along its first axis with an integer array (fancy index).

    Backward scatter-adds deterministically via bincount (fixed index order;
    identical programs reproduce identical gradients bitwise).
    """
    idx = np.asarray(idx)
    av = a.value
    out = np.take(av, idx, axis=0, out=a.tape.alloc(idx.shape + np.shape(av)[1:]))

    def back(g, _shape=np.shape(av)):
        return [(a.idx, _scatter_accumulate(g, idx, _shape))]

    return a.tape._emit(out, (a.idx,), back)


def _scatter_accumulate(g, idx, shape):
    flat_idx = idx.ravel()
    if len(shape) == 1:
        return np.bincount(flat_idx, weights=np.ascontiguousarray(g).ravel(),
                           minlength=shape[0]).reshape(shape)
    chans = shape[-1]
    z = np.empty(shape)
    gf = np.ascontiguousarray(g).reshape(-1, chans)
    for c in range(chans):
        z[:, c] = np.bincount(flat_idx, weights=gf[:, c], minlength=shape[0])
    return z


def scatter_sum(a: Var, idx: np.ndarray, size: int):
    """Segment sum: out[j] = sum of a[idx == j]; dual of gather.

    `a` is (K,) or (K, C); idx is (K,) ints; output (size,) or (size, C).
    """
    idx = np.asarray(idx)
    av = a.value
    out_shape = (size,) + np.shape(av)[1:]
    out = _scatter_accumulate(av, idx, out_shape)

    def back(g):
        return [(a.idx, np.take(g, idx, axis=0))]

    return a.tape._emit(out, (a.idx,), back)


def trilinear(param: Var, idx: np.ndarray, weights: np.ndarray):
    """Fused weighted corner gather: sum_c weights[c] * param[idx[c]].

    idx/weights have shape (8, ...); param is (M,) or (M, C).  One node
    replaces the eight separate gathers plus the multiply-add chain, which
    matters because this is the innermost loop of every field sampling.
    """
    idx = np.asarray(idx)
    w = np.asarray(weights, dtype=np.float64)
    pv = param.value
    chan = pv.ndim == 2
    t = param.tape
    base_shape = idx.shape[1:] + (pv.shape[1:] if chan else ())
    out = t.alloc(idx.shape[1:] + pv.shape[1:])
    tmp = t.alloc(idx.shape[1:] + pv.shape[1:])
    take_buf = t.alloc(idx.shape[1:] + pv.shape[1:])
    out[...] = 0.0
    for c in range(idx.shape[0]):
        np.take(pv, idx[c], axis=0, out=take_buf)
        np.multiply(take_buf, w[c][..., None] if chan else w[c], out=tmp)
        out += tmp

    def back(g, _shape=pv.shape):
        # one consolidated bincount over all eight corners per channel
        gw = g[None, ...] * (w[..., None] if chan else w)
        return [(param.idx, _scatter_accumulate(gw, idx, _shape))]

    return t._emit(out, (param.idx,), back)


def stack_last(vars_: list):
    t = _tape_of(*vars_)
    t.check(*vars_)
    vals = [_value_of(v) for v in vars_]
    out = np.stack(vals, axis=-1, out=t.alloc(np.shape(vals[0]) + (len(vals),)))
    var_slots = [(i, v.idx) for i, v in enumerate(vars_) if isinstance(v, Var)]

    def back(g):
        return [(pid, np.ascontiguousarray(g[..., slot])) for slot, pid in var_slots]

    return t._emit(out, tuple(pid for _, pid in var_slots), back)


def tensordot_last(a, w):
    """Contract the last axis of `a` with the first axis of matrix `w`."""
    t = _tape_of(a, w)
    av, wv = _value_of(a), _value_of(w)
    out = np.matmul(av, wv, out=t.alloc(np.shape(av)[:-1] + (np.shape(wv)[-1],)))
    parents = []
    if isinstance(a, Var):
        parents.append(a.idx)
    if isinstance(w, Var):
        parents.append(w.idx)

    def back(g):
        outs = []
        if isinstance(a, Var):
            outs.append((a.idx, g @ wv.T))
        if isinstance(w, Var):
            af = av.reshape(-1, av.shape[-1])
            gf = np.asarray(g).reshape(-1, g.shape[-1])
            outs.append((w.idx, af.T @ gf))
        return outs

    return t._emit(out, tuple(parents), back)


def expand_last(a: Var):
    """a[..., None]; broadcasts per-sample scalars over a channel axis."""
    av = a.value

    def back(g):
        return [(a.idx, g[..., 0])]

    return a.tape._emit(av[..., None] if np.ndim(av) else np.reshape(av, (1,)), (a.idx,), back)


_OPS = {
    "+": add, "-": sub, "*": mul, "/": div, "pow": powc, "exp": exp,
    "log": log, "sqrt": sqrt, "sin": sin, "cos": cos, "atan2": atan2,
    "min": minimum, "max": maximum, "clamp": clamp, "sigmoid": sigmoid,
    "abs": absolute,
}


def record(op: str, *operands):
    """Record a named op; the string names mirror the supported op set."""
    if op not in _OPS:
        raise DomainError(op, "unknown op")
    return _OPS[op](*operands)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str = ""
    worst_index: int = -1
    worst_analytic: float = 0.0
    worst_numeric: float = 0.0
    per_param: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradient check {status}: max rel error {self.max_rel_error:.3e} "
                f"at {self.worst_param}[{self.worst_index}] "
                f"(analytic {self.worst_analytic:.6e}, numeric {self.worst_numeric:.6e})")


def gradient_check(f, theta: dict, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of f against central finite differences.

    `f(tape, params)` must build and return a scalar Var from the dict of
    parameter Vars created from `theta`.  Relative errors use denominators
    floored at 1e-8; the report carries the worst offender.
    """
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in theta.items()}

    def run(values):
        tape = Tape()
        params = {k: tape.param(k, v) for k, v in values.items()}
        return tape, f(tape, params)

    tape, out = run(theta)
    analytic = tape.backward(out)

    report = GradCheckReport(passed=True, max_rel_error=0.0)
    for name, base in theta.items():
        flat = base.reshape(-1)
        ana = analytic[name].reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            vp = dict(theta)
            vp[name] = bumped.reshape(base.shape)
            tp, op = run(vp)
            fp = float(op.value)
            tp.release()
            bumped = flat.copy()
            bumped[i] = flat[i] - h
            vp[name] = bumped.reshape(base.shape)
            tm, om = run(vp)
            fm = float(om.value)
            tm.release()
            num[i] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        rel = np.abs(ana - num) / denom
        if rel.size == 0:
            report.per_param[name] = 0.0
            continue
        worst = int(np.argmax(rel))
        report.per_param[name] = float(rel.max())
        if rel[worst] > report.max_rel_error:
            report.max_rel_error = float(rel[worst])
            report.worst_param = name
            report.worst_index = worst
            report.worst_analytic = float(ana[worst])
            report.worst_numeric = float(num[worst])
    report.passed = report.max_rel_error < tol
    return report
