"""Reverse-mode automatic differentiation on a dynamic tape.

Nodes hold whole numpy arrays, so one recorded op covers a full batch of
rays or points. Every op also has a plain-numpy path: the module-level
functions (``exp``, ``stack``, ``where`` ...) return ndarrays when no input
is a :class:`Var`, which lets geometry and rendering code run unchanged
with or without gradients.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit


class InvalidInput(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when an optimizer step sees non-finite gradients."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x):
    return expit(x)


def _is_advanced(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def _getitem_vjp(g, out, x, idx):
    z = np.zeros_like(x)
    if _is_advanced(idx):
        np.add.at(z, idx, g)
    else:
        z[idx] += g
    return (z,)


def _matmul_vjp(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        ga = (b @ g[..., None])[..., 0] if b.ndim > 2 else b @ g
        gb = np.multiply.outer(a, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    if b.ndim == 1:
        ga = g[..., None] * b
        gb = np.tensordot(g, a, axes=(list(range(g.ndim)), list(range(a.ndim - 1))))
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _sum_vjp(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _concat_vjp(g, out, *xs, axis=0):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _stack_vjp(g, out, *xs, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))


def _minmax_vjp(pick_first):
    def vjp(g, out, a, b):
        first = pick_first(a, b)
        return _unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)
    return vjp


def _atan2_vjp(g, out, y, x):
    r2 = x * x + y * y
    r2 = np.where(r2 == 0, 1.0, r2)
    return _unbroadcast(g * x / r2, y.shape), _unbroadcast(-g * y / r2, x.shape)


# name -> (forward, vjp); vjp(g, out, *inputs, **kw) -> one gradient per input
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": (np.multiply, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "div": (np.divide, lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape))),
    "neg": (np.negative, lambda g, o, a: (-g,)),
    "exp": (np.exp, lambda g, o, a: (g * o,)),
    "log": (np.log, lambda g, o, a: (g / a,)),
    "sqrt": (np.sqrt, lambda g, o, a: (g * 0.5 / o,)),
    "sin": (np.sin, lambda g, o, a: (g * np.cos(a),)),
    "cos": (np.cos, lambda g, o, a: (-g * np.sin(a),)),
    "tanh": (np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda g, o, a: (g * _sigmoid(a),)),
    "sigmoid": (_sigmoid, lambda g, o, a: (g * o * (1.0 - o),)),
    "abs": (np.abs, lambda g, o, a: (g * np.sign(a),)),
    "power": (lambda a, p: np.power(a, p), lambda g, o, a, p: (g * p * np.power(a, p - 1),)),
    "atan2": (np.arctan2, _atan2_vjp),
    # ties go to the first argument
    "maximum": (np.maximum, _minmax_vjp(lambda a, b: a >= b)),
    "minimum": (np.minimum, _minmax_vjp(lambda a, b: a <= b)),
    "clamp": (lambda a, lo, hi: np.clip(a, lo, hi), lambda g, o, a, lo, hi: (np.where((a > lo) & (a < hi), g, 0.0),)),
    "where": (lambda a, b, cond: np.where(cond, a, b),
              lambda g, o, a, b, cond: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                        _unbroadcast(np.where(cond, 0.0, g), b.shape))),
    "matmul": (np.matmul, _matmul_vjp),
    "sum": (lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp),
    "getitem": (lambda a, idx: a[idx], _getitem_vjp),
    "reshape": (lambda a, shape: np.reshape(a, shape), lambda g, o, a, shape: (g.reshape(a.shape),)),
    "transpose": (lambda a, axes=None: np.transpose(a, axes),
                  lambda g, o, a, axes=None: (np.transpose(g, None if axes is None else np.argsort(axes)),)),
    "broadcast_to": (lambda a, shape: np.broadcast_to(a, shape).copy(),
                     lambda g, o, a, shape: (_unbroadcast(g, a.shape),)),
    "concat": (lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_vjp),
    "stack": (lambda *xs, axis=0: np.stack(xs, axis=axis), _stack_vjp),
}


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        return power(self, p)

    def __getitem__(self, idx):
        return self.tape.record("getitem", self, idx=idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of elementary operations.

    Node ids increase in recording order, so walking ids downward from the
    loss is a valid reverse topological order.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[str | None] = []
        self.inputs: list[tuple] = []
        self.kwargs: list[dict] = []

    def __len__(self):
        return len(self.values)

    def leaf(self, value) -> Var:
        self.values.append(np.asarray(value, dtype=float))
        self.ops.append(None)
        self.inputs.append(())
        self.kwargs.append({})
        return Var(self, len(self.values) - 1)

    def _resolve(self, x):
        if isinstance(x, Var):
            if x.tape is not self:
                raise InvalidInput("variable belongs to another tape")
            return x.id
        if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
            if not 0 <= x < len(self.values):
                raise InvalidInput(f"unknown variable id {x}")
            return int(x)
        return np.asarray(x, dtype=float)

    def record(self, op: str, *inputs, **kw) -> Var:
        """Apply ``op`` to ``inputs`` (Vars, ids or constants) and record it."""
        if op not in OPS:
            raise InvalidInput(f"unknown op {op!r}")
        fwd, _ = OPS[op]
        refs = tuple(self._resolve(x) for x in inputs)
        vals = [self.values[r] if isinstance(r, int) else r for r in refs]
        out = np.asarray(fwd(*vals, **kw), dtype=float)
        self.values.append(out)
        self.ops.append(op)
        self.inputs.append(refs)
        self.kwargs.append(kw)
        return Var(self, len(self.values) - 1)

    def backward(self, loss: Var | int, seed=None) -> list:
        """Adjoints of every node with respect to ``loss``.

        ``seed`` lets callers inject an upstream adjoint for a non-scalar
        output; without it the loss must hold exactly one element.
        """
        lid = self._resolve(loss)
        if not isinstance(lid, int):
            raise InvalidInput("loss must be a recorded variable")
        out = self.values[lid]
        if seed is None:
            if out.size != 1:
                raise InvalidInput(f"loss must be scalar, got shape {out.shape}")
            seed = np.ones_like(out)
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=float), out.shape).copy()
        grads: list = [None] * (lid + 1)
        grads[lid] = seed
        for i in range(lid, -1, -1):
            g = grads[i]
            op = self.ops[i]
            if g is None or op is None:
                continue
            refs = self.inputs[i]
            if not any(isinstance(r, int) for r in refs):
                continue
            vals = [self.values[r] if isinstance(r, int) else r for r in refs]
            parts = OPS[op][1](g, self.values[i], *vals, **self.kwargs[i])
            for r, gi in zip(refs, parts):
                if isinstance(r, int) and gi is not None:
                    grads[r] = gi if grads[r] is None else grads[r] + gi
        return grads


def _tape_of(xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _const(x):
    # plain numbers are constants here; only Tape.record reads ints as node ids
    return x if isinstance(x, Var) else np.asarray(x, dtype=float)


def _apply(op, *xs, **kw):
    tape = _tape_of(xs)
    if tape is None:
        return OPS[op][0](*[np.asarray(x, dtype=float) for x in xs], **kw)
    return tape.record(op, *[_const(x) for x in xs], **kw)


apply = _apply


def register_op(name: str, fwd: Callable, vjp: Callable):
    """Add a fused op; ``vjp(g, out, *inputs, **kw)`` returns one gradient per input."""
    if name in OPS:
        raise InvalidInput(f"op {name!r} already registered")
    OPS[name] = (fwd, vjp)


def add(a, b): return _apply("add", a, b)
def sub(a, b): return _apply("sub", a, b)
def mul(a, b): return _apply("mul", a, b)
def div(a, b): return _apply("div", a, b)
def neg(a): return _apply("neg", a)
def exp(a): return _apply("exp", a)
def log(a): return _apply("log", a)
def sqrt(a): return _apply("sqrt", a)
def sin(a): return _apply("sin", a)
def cos(a): return _apply("cos", a)
def tanh(a): return _apply("tanh", a)
def softplus(a): return _apply("softplus", a)
def sigmoid(a): return _apply("sigmoid", a)
def abs(a): return _apply("abs", a)
def atan2(y, x): return _apply("atan2", y, x)
def maximum(a, b): return _apply("maximum", a, b)
def minimum(a, b): return _apply("minimum", a, b)
def matmul(a, b): return _apply("matmul", a, b)
def power(a, p): return _apply("power", a, p=p)
def clamp(a, lo, hi): return _apply("clamp", a, lo=lo, hi=hi)
def transpose(a, axes=None): return _apply("transpose", a, axes=axes)
def reshape(a, shape): return _apply("reshape", a, shape=tuple(shape))
def broadcast_to(a, shape): return _apply("broadcast_to", a, shape=tuple(shape))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    if isinstance(cond, Var):
        cond = cond.value
    return _apply("where", a, b, cond=np.asarray(cond, dtype=bool))


def sum(a, axis=None, keepdims=False):
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    shape = value(a).shape
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(n, 1))


def dot(a, b, axis=-1):
    return sum(mul(a, b), axis=axis)


def concat(xs, axis=0):
    xs = list(xs)
    tape = _tape_of(xs)
    if tape is None:
        return np.concatenate([np.asarray(x, dtype=float) for x in xs], axis=axis)
    return tape.record("concat", *[_const(x) for x in xs], axis=axis)


def stack(xs, axis=0):
    xs = list(xs)
    tape = _tape_of(xs)
    if tape is None:
        return np.stack([np.asarray(x, dtype=float) for x in xs], axis=axis)
    return tape.record("stack", *[_const(x) for x in xs], axis=axis)


def value(x) -> np.ndarray:
    """The numeric value of ``x`` with no gradient connection."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


stop_gradient = value


def softmax(logits, axis=-1):
    shift = np.max(value(logits), axis=axis, keepdims=True)
    e = exp(logits - shift)
    return e / sum(e, axis=axis, keepdims=True)


def norm(x, axis=-1, keepdims=False, eps=0.0):
    return sqrt(sum(x * x, axis=axis, keepdims=keepdims) + eps)


class ParamStore:
    """Named parameter blocks with per-block freeze flags."""

    def __init__(self):
        self._blocks: dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, init, frozen: bool = False) -> np.ndarray:
        if name in self._blocks:
            raise InvalidInput(f"duplicate parameter block {name!r}")
        arr = np.array(init, dtype=float)
        self._blocks[name] = arr
        if frozen:
            self._frozen.add(name)
        return arr

    def __getitem__(self, name):
        return self._blocks[name]

    def __contains__(self, name):
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._blocks if n.startswith(prefix)]

    def items(self):
        return self._blocks.items()

    def values(self):
        return self._blocks.values()

    def set(self, name, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self._blocks[name].shape:
            raise InvalidInput(f"shape mismatch for {name!r}: {value.shape} vs {self._blocks[name].shape}")
        self._blocks[name] = value.copy()

    def remove(self, prefix: str):
        for n in self.names(prefix):
            del self._blocks[n]
            self._frozen.discard(n)

    @property
    def size(self) -> int:
        return int(np.sum([b.size for b in self._blocks.values()]))

    def is_frozen(self, name) -> bool:
        return name in self._frozen

    def _expand(self, names):
        out = []
        for n in names:
            hits = [n] if n in self._blocks else self.names(n)
            if not hits:
                raise InvalidInput(f"no parameter block matches {n!r}")
            out.extend(hits)
        return out

    def freeze(self, *names):
        self._frozen.update(self._expand(names))

    def unfreeze(self, *names):
        self._frozen.difference_update(self._expand(names))

    @contextlib.contextmanager
    def frozen(self, *names):
        """Freeze the named blocks (or name prefixes) for the duration."""
        targets = [n for n in self._expand(names) if n not in self._frozen]
        self._frozen.update(targets)
        try:
            yield self
        finally:
            self._frozen.difference_update(targets)

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {n: tape.leaf(v) for n, v in self._blocks.items()}

    def copy(self) -> "ParamStore":
        new = ParamStore()
        new._blocks = {n: v.copy() for n, v in self._blocks.items()}
        new._frozen = set(self._frozen)
        return new

    def flat(self) -> np.ndarray:
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._blocks.values()])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise InvalidInput("flat vector length does not match the store")
        i = 0
        for n, v in self._blocks.items():
            self._blocks[n] = vec[i:i + v.size].reshape(v.shape).copy()
            i += v.size


def backward(loss: Var, params: Mapping[str, Var], store: ParamStore | None = None,
             seed=None) -> dict[str, np.ndarray]:
    """Gradient of ``loss`` for every bound parameter block.

    Blocks the loss does not touch, and frozen blocks, get exact zeros.
    """
    if not isinstance(loss, Var):
        return {n: np.zeros_like(v.value) for n, v in params.items()}
    adj = loss.tape.backward(loss, seed=seed)
    out = {}
    for n, v in params.items():
        g = adj[v.id] if v.id < len(adj) else None
        if g is None or (store is not None and store.is_frozen(n)):
            out[n] = np.zeros_like(v.value)
        else:
            out[n] = np.array(g, dtype=float)
    return out


def value_and_grad(f: Callable[[Mapping], Var], store: ParamStore):
    tape = Tape()
    params = store.bind(tape)
    loss = f(params)
    return float(value(loss).sum()), backward(loss, params, store)


@dataclass
class AdamW:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, grads: Mapping[str, np.ndarray], store: ParamStore) -> ParamStore:
        for n, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in block {n!r}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for n, g in grads.items():
            if store.is_frozen(n) or n not in store:
                continue
            p = store[n]
            if g.shape != p.shape:
                raise InvalidInput(f"gradient shape {g.shape} does not match block {n!r} {p.shape}")
            m = self.m.setdefault(n, np.zeros_like(p))
            v = self.v.setdefault(n, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return store

    def reset(self, prefix: str = ""):
        for d in (self.m, self.v):
            for n in [k for k in d if k.startswith(prefix)]:
                del d[n]


def adamw_step(state: AdamW, grads: Mapping[str, np.ndarray], store: ParamStore) -> ParamStore:
    return state.step(grads, store)


def finite_diff_check(f: Callable[[Mapping], object], store: ParamStore, h: float = 1e-4,
                      names: Iterable[str] | None = None, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Relative error between tape gradients and central differences.

    The error is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` in the 2-norm over
    the checked coordinates (0 when both vanish). ``max_coords`` checks a
    random subset of coordinates per block.
    """
    _, grads = value_and_grad(f, store)
    names = list(store) if names is None else list(names)
    rng = rng if rng is not None else np.random.default_rng(0)
    ana, num = [], []
    for n in names:
        if store.is_frozen(n):
            continue
        block = store[n]
        idx = np.arange(block.size)
        if max_coords is not None and block.size > max_coords:
            idx = rng.choice(block.size, max_coords, replace=False)
        flat = block.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(value(f(store))))
            flat[i] = orig - h
            fm = float(np.sum(value(f(store))))
            flat[i] = orig
            num.append((fp - fm) / (2 * h))
            ana.append(grads[n].reshape(-1)[i])
    ana, num = np.array(ana), np.array(num)
    scale = max(np.linalg.norm(ana), np.linalg.norm(num))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(ana - num) / scale)
