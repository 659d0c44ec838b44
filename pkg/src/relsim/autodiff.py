"""Reverse-mode automatic differentiation on a per-step gradient tape.

Tensors wrap float64 numpy arrays. While a :class:`Tape` is active (as a
context manager), every operation that touches a tracked tensor records a
backward rule; ``Tape.backward`` replays the rules in reverse and returns a
:class:`Gradients` map. With no active tape, operations run forward-only,
which is what evaluation passes use.

A tape and the tensors recorded on it belong to one thread; independent
training runs may proceed in parallel, each with its own tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "tensor",
    "add",
    "sub",
    "multiply",
    "matmul",
    "concat",
    "stack",
    "narrow",
    "take_row",
    "embed_sequence",
    "add_rowvec",
    "absolute",
    "mean",
    "total",
    "scale",
    "sigmoid",
    "tanh",
    "log_softmax",
    "max_over_time",
    "sgd_step",
    "perturb_backward",
]


class Tensor:
    """A float64 array plus the bookkeeping needed to reach it on a tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a Tensor from array-like data."""
    return Tensor(data, requires_grad=requires_grad)


_ACTIVE = threading.local()

# Test hook: (op name, delta) applied to that op's input gradients.
_PERTURB: tuple[str, float] | None = None


@contextmanager
def perturb_backward(op_name: str, delta: float) -> Iterator[None]:
    """Deliberately corrupt one op's backward rule (negative-control hook)."""
    global _PERTURB
    _PERTURB = (op_name, delta)
    try:
        yield
    finally:
        _PERTURB = None


def _active_tape() -> "Tape | None":
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass.

    ``nodes`` holds (output_id, input_ids, backward_rule) triples; ids are
    assigned in creation order, so inputs always precede consumers.
    ``gradients`` is filled by :meth:`backward`.
    """

    __slots__ = ("nodes", "gradients", "_next_id", "_outer")

    def __init__(self):
        self.nodes: list[tuple[int, tuple[int, ...], Callable[[Array], tuple]]] = []
        self.gradients: dict[int, Array] = {}
        self._next_id = 0
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tape = self._outer
        self._outer = None

    def _register(self, t: Tensor) -> int:
        if t.tape is self:
            return t.node_id  # type: ignore[return-value]
        nid = self._next_id
        self._next_id = nid + 1
        t.tape = self
        t.node_id = nid
        return nid

    def backward(self, loss: Tensor) -> "Gradients":
        """Accumulate d(loss)/d(tensor) for everything reachable from loss."""
        if loss.shape != ():
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, Array] = {}
        if loss.tape is self and loss.node_id is not None:
            grads[loss.node_id] = np.ones((), dtype=np.float64)
        for out_id, in_ids, rule in reversed(self.nodes):
            g = grads.get(out_id)
            if g is None:
                continue
            for iid, gi in zip(in_ids, rule(g)):
                if iid < 0 or gi is None:
                    continue
                acc = grads.get(iid)
                # never mutate stored arrays: rules are allowed to alias g
                grads[iid] = gi if acc is None else acc + gi
        self.gradients = grads
        return Gradients(self, grads)


class Gradients(Mapping[int, Array]):
    """Gradient map from one backward pass; tensors off the tape read as zero."""

    __slots__ = ("_tape", "_by_id")

    def __init__(self, tape: Tape, by_id: dict[int, Array]):
        self._tape = tape
        self._by_id = by_id

    def get_wrt(self, t: Tensor) -> Array | None:
        """Gradient for t, or None when no gradient reached it."""
        if t.tape is self._tape and t.node_id in self._by_id:
            return self._by_id[t.node_id]
        return None

    def wrt(self, t: Tensor) -> Array:
        """Gradient for t; zeros when the loss never reached it."""
        g = self.get_wrt(t)
        if g is None:
            return np.zeros_like(t.data)
        return np.broadcast_to(g, t.data.shape) if g.shape != t.data.shape else g

    def __getitem__(self, node_id: int) -> Array:
        return self._by_id[node_id]

    def __iter__(self):
        return iter(self._by_id)

    def __len__(self) -> int:
        return len(self._by_id)


def _record(
    out: Tensor,
    inputs: tuple[Tensor, ...],
    rule: Callable[[Array], tuple],
    name: str,
) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    tracked = False
    for t in inputs:
        if t.requires_grad or t.tape is tape:
            tracked = True
            break
    if not tracked:
        return out
    in_ids = tuple(
        tape._register(t) if (t.requires_grad or t.tape is tape) else -1
        for t in inputs
    )
    out_id = tape._register(out)
    if _PERTURB is not None and _PERTURB[0] == name:
        delta = _PERTURB[1]
        inner = rule
        rule = lambda g: tuple(
            None if gi is None else gi + delta for gi in inner(g)
        )
    tape.nodes.append((out_id, in_ids, rule))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not match"
        )


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of same-shape tensors."""
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g), "sub")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _same_shape(a, b, "multiply")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _record(out, (a, b), lambda g: (g * bd, g * ad), "multiply")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for (m,k)@(k,n), (m,k)@(k,), and (k,)@(k,n)."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(
            f"matmul: shapes {ad.shape} and {bd.shape} are not aligned"
        )
    out = Tensor(ad @ bd)
    if ad.ndim == 2 and bd.ndim == 1:
        rule = lambda g: (np.outer(g, bd), ad.T @ g)
    elif ad.ndim == 1 and bd.ndim == 2:
        rule = lambda g: (bd @ g, np.outer(ad, g))
    elif ad.ndim == 2 and bd.ndim == 2:
        rule = lambda g: (g @ bd.T, ad.T @ g)
    else:  # (k,)@(k,) dot product
        rule = lambda g: (g * bd, g * ad)
    return _record(out, (a, b), rule, "matmul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the constant c."""
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,), "scale")


def absolute(a: Tensor) -> Tensor:
    """Elementwise absolute value (subgradient 0 at exact zeros)."""
    ad = a.data
    out = Tensor(np.abs(ad))
    return _record(out, (a,), lambda g: (g * np.sign(ad),), "absolute")


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    n = a.data.size
    if n == 0:
        raise ValueError("mean: empty tensor")
    shape = a.data.shape
    out = Tensor(a.data.mean())
    return _record(
        out, (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean"
    )


def total(a: Tensor) -> Tensor:
    """Sum over all elements, as a scalar tensor."""
    shape = a.data.shape
    out = Tensor(a.data.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape),), "total")


# ---------------------------------------------------------------------------
# shape plumbing


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors of equal rank along an existing axis."""
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    datas = [t.data for t in tensors]
    ndim = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != ndim:
            raise ValueError(
                f"concat: ranks differ ({datas[0].shape} vs {d.shape})"
            )
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes[:-1])

    def rule(g: Array) -> tuple:
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), rule, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a (T, d) matrix."""
    if not tensors:
        raise ValueError("stack: need at least one tensor")
    datas = [t.data for t in tensors]
    d0 = datas[0].shape
    for d in datas[1:]:
        if d.shape != d0:
            raise ValueError(f"stack: shapes {d0} and {d.shape} do not match")
    out = Tensor(np.stack(datas))

    def rule(g: Array) -> tuple:
        return tuple(g[t] for t in range(len(datas)))

    return _record(out, tuple(tensors), rule, "stack")


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] of a vector."""
    ad = a.data
    if ad.ndim != 1:
        raise ValueError(f"narrow: expected a vector, got shape {ad.shape}")
    if not (0 <= start <= stop <= ad.shape[0]):
        raise ValueError(
            f"narrow: [{start}:{stop}] out of range for shape {ad.shape}"
        )
    n = ad.shape[0]
    out = Tensor(ad[start:stop])

    def rule(g: Array) -> tuple:
        z = np.zeros(n, dtype=np.float64)
        z[start:stop] = g
        return (z,)

    return _record(out, (a,), rule, "narrow")


def take_row(a: Tensor, index: int) -> Tensor:
    """Row `index` of a matrix, as a vector."""
    ad = a.data
    if ad.ndim != 2:
        raise ValueError(f"take_row: expected a matrix, got shape {ad.shape}")
    shape = ad.shape
    out = Tensor(ad[index])

    def rule(g: Array) -> tuple:
        z = np.zeros(shape, dtype=np.float64)
        z[index] = g
        return (z,)

    return _record(out, (a,), rule, "take_row")


def embed_sequence(matrix: Tensor, indices) -> Tensor:
    """Gather rows of an embedding matrix; repeated rows accumulate gradient."""
    md = matrix.data
    if md.ndim != 2:
        raise ValueError(
            f"embed_sequence: expected a matrix, got shape {md.shape}"
        )
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(md[idx])
    shape = md.shape

    def rule(g: Array) -> tuple:
        z = np.zeros(shape, dtype=np.float64)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (matrix,), rule, "embed_sequence")


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    ad, vd = a.data, v.data
    if ad.ndim != 2 or vd.ndim != 1 or ad.shape[1] != vd.shape[0]:
        raise ValueError(
            f"add_rowvec: shapes {ad.shape} and {vd.shape} do not broadcast"
        )
    out = Tensor(ad + vd)
    return _record(out, (a, v), lambda g: (g, g.sum(axis=0)), "add_rowvec")


# ---------------------------------------------------------------------------
# activations and pooling


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function."""
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    """Hyperbolic tangent."""
    t = np.tanh(a.data)
    out = Tensor(t)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log_softmax(a: Tensor) -> Tensor:
    """Log of the softmax along the last axis, max-subtracted for stability."""
    x = a.data
    if x.ndim not in (1, 2):
        raise ValueError(
            f"log_softmax: expected a vector or batch of vectors, got shape {x.shape}"
        )
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    out = Tensor(y)
    return _record(
        out,
        (a,),
        lambda g: (g - sm * g.sum(axis=-1, keepdims=True),),
        "log_softmax",
    )


def max_over_time(h: Tensor) -> Tensor:
    """Columnwise maximum of a (T, d) matrix; gradient goes to the first argmax."""
    hd = h.data
    if hd.ndim != 2:
        raise ValueError(f"max_over_time: expected (T, d), got shape {hd.shape}")
    if hd.shape[0] < 1:
        raise ValueError("max_over_time: empty time dimension")
    amax = hd.argmax(axis=0)
    out = Tensor(hd[amax, np.arange(hd.shape[1])])
    shape = hd.shape

    def rule(g: Array) -> tuple:
        z = np.zeros(shape, dtype=np.float64)
        z[amax, np.arange(shape[1])] = g
        return (z,)

    return _record(out, (h,), rule, "max_over_time")


# ---------------------------------------------------------------------------
# optimization


def sgd_step(
    params: Iterable[Tensor] | Mapping[str, Tensor],
    grads: Gradients,
    lr: float,
) -> None:
    """Plain SGD update p <- p - lr * grad(p); missing gradients count as zero."""
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be >= 0, got {lr}")
    if isinstance(params, Mapping):
        params = params.values()
    for p in params:
        g = grads.get_wrt(p)
        if g is None:
            continue
        p.data = p.data - lr * g
