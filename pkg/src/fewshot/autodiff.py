"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` is created per forward pass. Tensors that carry a tape
handle record every op applied to them; tensors without one are plain
constants, so the same model code runs both with and without a tape
(evaluation skips the bookkeeping entirely).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Callable | None
    shape: tuple


class Tensor:
    __slots__ = ("data", "tape", "node_id")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.node_id is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of ops; node ids are positions in ``nodes``."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[int, Parameter] = {}

    def leaf(self, value, op: str = "leaf") -> Tensor:
        data = np.array(value, dtype=np.float64)
        self.nodes.append(_Node(op, (), None, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def param(self, p: Parameter) -> Tensor:
        if not p.trainable:
            return Tensor(p.value)
        t = self.leaf(p.value, op="param")
        self.params[t.node_id] = p
        return t

    def record(self, op: str, data: np.ndarray, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        ids = tuple(t.node_id for t in inputs)
        self.nodes.append(_Node(op, ids, backward, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> "Gradients":
        if root.data.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {}
        if root.tape is self and root.node_id is not None:
            grads[root.node_id] = np.ones(root.shape)
            for nid in range(root.node_id, -1, -1):
                g = grads.get(nid)
                node = self.nodes[nid]
                if g is None or node.backward is None:
                    continue
                for iid, gi in zip(node.inputs, node.backward(g)):
                    if iid is None or gi is None:
                        continue
                    if iid in grads:
                        grads[iid] = grads[iid] + gi
                    else:
                        grads[iid] = gi
        return Gradients(self, grads)


class Gradients:
    def __init__(self, tape: Tape, buffers: dict[int, np.ndarray]):
        self.tape = tape
        self.buffers = buffers

    def of(self, t: Tensor) -> np.ndarray:
        if t.node_id is None or t.node_id not in self.buffers:
            return np.zeros(t.shape)
        return self.buffers[t.node_id]

    def by_name(self) -> dict[str, np.ndarray]:
        """Parameter gradients; params used more than once on the tape are summed."""
        out: dict[str, np.ndarray] = {}
        for nid, p in self.tape.params.items():
            g = self.buffers.get(nid)
            if g is None:
                g = np.zeros(p.shape)
            out[p.name] = out[p.name] + g if p.name in out else np.array(g)
        return out


# ---------------------------------------------------------------- plumbing

def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _check_finite(op: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(op, data, inputs, backward) -> Tensor:
    _check_finite(op, data)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------- unary ops

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make("sqrt", out, (x,), backward)


def power(x, p: float) -> Tensor:
    """``x ** p`` for a constant exponent.

    Negative bases are only allowed for integer exponents. Where the base is
    0 and ``p < 1`` the derivative is unbounded; it is taken as 0 there.
    """
    x = as_tensor(x)
    p = float(p)
    if not p.is_integer() and np.any(x.data < 0):
        raise DomainError(f"pow({p}) of negative value")
    if p < 0 and np.any(x.data == 0):
        raise DomainError(f"pow({p}) of zero")
    out = np.power(x.data, p)

    def backward(g):
        if p == 0:
            return (np.zeros_like(g),)
        if p >= 1:
            return (g * p * np.power(x.data, p - 1),)
        nz = x.data != 0
        base = np.where(nz, x.data, 1.0)
        return (np.where(nz, g * p * np.power(base, p - 1), 0.0),)

    return _make(f"pow({p:g})", out, (x,), backward)


def absolute(x) -> Tensor:
    """|x| with subgradient 0 at the origin."""
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was not clamped."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return _make("clip", out, (x,), lambda g: (np.where(inside, g, 0.0),))


def arcosh(x) -> Tensor:
    """ln(x + sqrt(x^2 - 1)) with x clamped to >= 1; gradient 0 where clamped."""
    x = as_tensor(x)
    xc = np.maximum(x.data, 1.0)
    rad = np.sqrt(xc * xc - 1.0)
    out = np.log(xc + rad)

    def backward(g):
        ok = rad > 1e-12
        return (np.where(ok, g / np.where(ok, rad, 1.0), 0.0),)

    return _make("arcosh", out, (x,), backward)


_ELEMENTWISE = {
    "neg": neg, "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
    "sqrt": sqrt, "abs": absolute, "add": add, "sub": sub, "mul": mul,
    "div": div, "pow": power,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("pow", x, 3)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- reductions

def _axis(x: Tensor, axis):
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"reduction over empty axis {axis}")
    return axis


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axis = _axis(x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[_axis(x, axis)]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def max_over_axis(x, axis: int, mask: np.ndarray | None = None, keepdims=False) -> Tensor:
    """Max along ``axis``; gradient goes to the lowest-index winner only.

    ``mask`` (same shape as x, boolean) marks entries allowed to win; every
    reduced slice must contain at least one allowed entry.
    """
    x = as_tensor(x)
    axis = _axis(x, axis)
    vals = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"mask shape {mask.shape} != {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise DimensionError("max over a slice with no unmasked entries")
        vals = np.where(mask, vals, -np.inf)
    idx = np.argmax(vals, axis=axis)  # first occurrence on ties
    out = np.take_along_axis(vals, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return (gx,)

    return _make("max", out, (x,), backward)


def reduce(op: str, x, axis=None, **kw) -> Tensor:
    if op == "sum":
        return sum(x, axis, **kw)
    if op == "mean":
        return mean(x, axis, **kw)
    if op in ("max", "max_over_axis"):
        if axis is None:
            raise DimensionError("max reduction needs an axis")
        return max_over_axis(x, axis, **kw)
    raise ValueError(f"unknown reduction {op!r}")


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make("softmax_rows", out, (x,), backward)


# ---------------------------------------------------------------- shape ops

def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of nothing")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0]
    axis = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
                x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise DimensionError(f"concat: shapes {ref.shape} and {x.shape} differ off axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[..., start:stop].copy()

    def backward(g):
        gx = np.zeros(x.shape)
        gx[..., start:stop] = g
        return (gx,)

    return _make("slice_cols", out, (x,), backward)


def take_rows(x, idx) -> Tensor:
    """Gather rows ``x[idx]``; idx may be any integer array (embedding lookup)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"row index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take_rows", out, (x,), backward)


def stack_rows(xs: Sequence) -> Tensor:
    """Stack 1-row matrices (or vectors) into a matrix."""
    xs = [as_tensor(x) for x in xs]
    xs = [reshape(x, (1, -1)) if x.ndim == 1 else x for x in xs]
    return concat(xs, axis=0)


# ---------------------------------------------------------------- row-wise geometry

def l2_normalize_rows(x, tiny: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm; rows with norm below ``tiny`` map to 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    ok = n >= tiny
    inv = np.where(ok, 1.0 / np.where(ok, n, 1.0), 0.0)
    y = x.data * inv

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) * inv,)

    return _make("l2_normalize_rows", y, (x,), backward)


def project_rows_to_ball(x, epsilon: float = 1e-5) -> Tensor:
    """Rescale rows with norm >= 1 - epsilon onto the sphere of radius 1 - epsilon."""
    x = as_tensor(x)
    r = 1.0 - epsilon
    n = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    over = n >= r
    scale = np.where(over, r / np.where(over, n, 1.0), 1.0)
    y = x.data * scale

    def backward(g):
        # d(r x/|x|) = (r/|x|)(I - x x^T/|x|^2)
        safe = np.where(over, n, 1.0)
        radial = x.data * (g * x.data).sum(axis=-1, keepdims=True) / safe ** 2
        return (np.where(over, scale * (g - radial), g),)

    return _make("project_to_ball", y, (x,), backward)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tol]


def grad_check(f: Callable[[Tape], Tensor], params: Iterable[Parameter],
               step: float = 1e-4, tol: float = 1e-4, max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a fresh tape each call and must read parameters through
    ``tape.param``. Relative error per parameter is
    ``|analytic - numeric| / max(|numeric|, 1e-8)`` over the checked entries.
    With ``max_entries`` set, larger parameters are checked on that many
    seeded random entries instead of all of them.
    """
    params = list(params)
    tape = Tape()
    root = f(tape)
    analytic = tape.backward(root).by_name()
    report = GradCheckReport(tol=tol)
    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.value.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            entries = np.arange(flat.size)
        else:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.zeros(entries.size)
        for j, i in enumerate(entries):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(Tape()).data)
            flat[i] = orig - step
            down = float(f(Tape()).data)
            flat[i] = orig
            num[j] = (up - down) / (2 * step)
        ana = analytic.get(p.name, np.zeros(p.shape)).reshape(-1)[entries]
        report.errors[p.name] = float(
            np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-8))
    return report
