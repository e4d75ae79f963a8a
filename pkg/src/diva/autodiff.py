"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation takes :class:`Node` inputs (plain arrays and
scalars are accepted as constants), computes its value eagerly and appends a
record ``(output, parents, vjp)`` to the tape that owns its inputs.  Records
are appended in creation order, which is a topological order of the graph, so
``Tape.backward`` only has to walk the list once in reverse.

A tape is single-owner and not thread-safe.  Build one per step.
"""

from __future__ import annotations

from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

EPS_NORM = 1e-12


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "id", "value", "requires_grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Node dispatch to Node

    def __init__(self, tape: "Tape", id: int, value: np.ndarray, requires_grad: bool, name=None):
        self.tape = tape
        self.id = id
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.id}{label}(shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Gradients:
    """Read-only view of the accumulators filled by one backward pass."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node: Node) -> np.ndarray:
        g = self._grads.get(node.id)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def __contains__(self, node: Node) -> bool:
        return node.id in self._grads


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self, reversal_refs: list[np.ndarray] | None = None):
        self._records: list[tuple[int, tuple[Node, ...], Callable]] = []
        self._next_id = 0
        # inputs seen by gradient_reversal, in call order; see finite_diff_check
        self.reversal_inputs: list[np.ndarray] = []
        self._reversal_refs = reversal_refs

    def __len__(self):
        return len(self._records)

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, value, name=None, requires_grad: bool = True) -> Node:
        value = np.array(value, dtype=np.float64)
        return Node(self, self._new_id(), value, requires_grad, name)

    def constant(self, value, name=None) -> Node:
        return self.leaf(value, name=name, requires_grad=False)

    def record(self, value: np.ndarray, parents: Sequence[Node], vjp: Callable) -> Node:
        """Wrap ``value`` as a node; keep ``vjp`` only if some parent needs grads.

        ``vjp(g)`` returns one gradient (or None) per parent, each already
        shaped like that parent.
        """
        requires_grad = any(p.requires_grad for p in parents)
        out = Node(self, self._new_id(), value, requires_grad)
        if requires_grad:
            self._records.append((out.id, tuple(parents), vjp))
        return out

    def backward(self, loss: Node) -> Gradients:
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for out_id, parents, vjp in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        return Gradients(grads)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("operation needs at least one Node input")


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ContractError("mixing nodes from different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b):
    tape = _tape_of(a, b)
    return tape, _lift(tape, a), _lift(tape, b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    tape, a, b = _binary(a, b)
    out = a.value + b.value
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    tape, a, b = _binary(a, b)
    out = a.value - b.value
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Node:
    tape, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
    )


def neg(x: Node) -> Node:
    return x.tape.record(-x.value, (x,), lambda g: (-g,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return x.tape.record(out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    xv = x.value
    return x.tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)
    return x.tape.record(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Node) -> Node:
    xv = x.value
    return x.tape.record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    # np.maximum keeps NaN, so a blown-up forward pass still shows in the loss
    return x.tape.record(np.maximum(x.value, 0.0), (x,), lambda g: (g * mask,))


hinge = relu


def minimum(x: Node, c) -> Node:
    """Elementwise ``min(x, c)`` with a constant ``c``; gradient passes where x < c."""
    c = np.asarray(c, dtype=np.float64)
    mask = x.value < c
    return x.tape.record(np.where(mask, x.value, c), (x,), lambda g: (_unbroadcast(g * mask, x.shape),))


def clip(x: Node, lo: float, hi: float) -> Node:
    xv = x.value
    mask = (xv > lo) & (xv < hi)
    return x.tape.record(np.clip(xv, lo, hi), (x,), lambda g: (g * mask,))


def gradient_reversal(x: Node) -> Node:
    """Identity forward; multiplies the incoming gradient by -1."""
    tape = x.tape
    tape.reversal_inputs.append(x.value.copy())
    value = x.value.copy()
    if tape._reversal_refs is not None:
        # probe mode: x -> 2 x0 - x has the value of x at x0 and slope -1
        ref = tape._reversal_refs[len(tape.reversal_inputs) - 1]
        value = 2.0 * ref - x.value
    return tape.record(value, (x,), lambda g: (-g,))


# ------------------------------------------------------------------ reductions


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    out = np.sum(x.value, axis=axis, keepdims=keepdims)
    return x.tape.record(np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    out = np.mean(x.value, axis=axis, keepdims=keepdims)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return x.tape.record(np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims) / n,))


def logsumexp(x: Node, axis: int = -1) -> Node:
    xv = x.value
    m = np.max(xv, axis=axis, keepdims=True)
    shifted = np.exp(xv - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * shifted / s,)

    return x.tape.record(out, (x,), vjp)


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    tape, a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, W, b) -> Node:
    """``y = x W + b`` for a single row vector or a batch of rows."""
    tape = _tape_of(x, W, b)
    x, W, b = _lift(tape, x), _lift(tape, W), _lift(tape, b)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.shape[-1] != W.shape[0] or x.ndim > 2:
        raise DimensionError(f"linear: x{x.shape} W{W.shape} b{b.shape} do not conform")
    xv, Wv = x.value, W.value
    out = xv @ Wv + b.value

    def vjp(g):
        if xv.ndim == 1:
            return g @ Wv.T, np.outer(xv, g), g
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return tape.record(out, (x, W, b), vjp)


def transpose(x: Node) -> Node:
    return x.tape.record(x.value.T, (x,), lambda g: (g.T,))


def reshape(x: Node, shape) -> Node:
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Node, index) -> Node:
    out = x.value[index]

    def vjp(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        return (full,)

    return x.tape.record(np.array(out), (x,), vjp)


def take_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(x, idx)


def concat(xs: Sequence, axis: int = 0) -> Node:
    tape = _tape_of(*xs)
    nodes = [_lift(tape, x) for x in xs]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return tape.record(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


def rowdot(a, b) -> Node:
    """Row-wise inner products of two equally shaped matrices."""
    return sum(mul(a, b), axis=-1)


# ---------------------------------------------------------------- normalization


def l2_normalize(x: Node, axis: int = -1) -> Node:
    """Project rows onto the unit sphere.

    Raises DegenerateVectorError when any row norm is <= EPS_NORM.
    """
    xv = x.value
    norm = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=True))
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError("cannot normalize a vector with norm <= 1e-12")
    out = xv / norm

    def vjp(g):
        # d(x/|x|) = (g - out <out, g>) / |x|
        return ((g - out * np.sum(out * g, axis=axis, keepdims=True)) / norm,)

    return x.tape.record(out, (x,), vjp)


# ----------------------------------------------------------------- grad checks


class GradCheck(NamedTuple):
    max_rel_err: float
    checked: int
    kinks: int


def finite_diff_check(
    fn: Callable[[Tape, dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float = 1e-4,
) -> GradCheck:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn(tape, nodes)`` must rebuild the scalar loss from the bound parameter
    nodes and be deterministic.  Relative error per coordinate is
    ``|analytic - central| / max(1, |analytic|)``.  Coordinates whose one-sided
    differences disagree by more than ``kink_tol`` are retried with a hundred
    times smaller step.  Strong curvature passes the retry: the one-sided gap
    shrinks and both central differences agree.  A kink (hinge, clamp, ReLU
    boundary) within ``h`` fails one of the two and the coordinate is excluded.
    A kink that slips through shifts the central difference by at most
    ``kink_tol / 2``.  ``max_coords`` samples that many coordinates per
    parameter tensor instead of checking all of them.

    Gradient reversal nodes are identities in value, so plain differences
    would disagree with their flipped gradients.  Perturbed evaluations
    therefore replace each reversal (matched by call order) with
    ``x -> 2 x0 - x``, where ``x0`` is its input at the unperturbed point: the
    same value at the base point, derivative -1, exactly what the tape claims.
    """
    tape = Tape()
    nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = fn(tape, nodes)
    f0 = float(loss.value)
    grads = tape.backward(loss)

    def evaluate(name, flat_index, delta):
        shifted = dict(params)
        arr = np.array(params[name], dtype=np.float64, copy=True)
        arr.reshape(-1)[flat_index] += delta
        shifted[name] = arr
        t = Tape(reversal_refs=tape.reversal_inputs)
        return float(fn(t, {k: t.leaf(v, name=k) for k, v in shifted.items()}).value)

    rng = rng or np.random.default_rng(0)
    worst, checked, kinks = 0.0, 0, 0
    for name, value in params.items():
        size = np.size(value)
        coords: Iterable[int] = range(size)
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        analytic = grads[nodes[name]].reshape(-1)
        for i in coords:
            fp, fm = evaluate(name, i, h), evaluate(name, i, -h)
            gap = abs(fp - 2 * f0 + fm) / h
            central = (fp - fm) / (2 * h)
            if gap > kink_tol * max(1.0, abs(central)):
                h2 = h / 100
                fp2, fm2 = evaluate(name, i, h2), evaluate(name, i, -h2)
                central2 = (fp2 - fm2) / (2 * h2)
                scale = kink_tol * max(1.0, abs(central2))
                if abs(fp2 - 2 * f0 + fm2) / h2 > scale or abs(central - central2) > scale / 2:
                    kinks += 1
                    continue
                central = central2
            err = abs(analytic[i] - central) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
            checked += 1
    return GradCheck(worst, checked, kinks)
