"""Dense float64 tensors with a reverse-mode differentiation tape.

Values live in numpy arrays (row-major). Differentiable ops record nodes on
the active ``Tape`` (opened with ``with Tape() as tape:``); ``backward``
replays the tape once in reverse order, accumulating gradients additively at
fan-out. Ops executed outside any tape run in inference mode and record
nothing, which is how no-gradient forward passes are done.

Broadcasting is deliberately restricted: elementwise ops accept equal-shape
tensors or a Python scalar. Anything richer (bias rows, per-head scaling,
embedding lookup) is a dedicated op with an explicit, auditable backward
rule. Intermediate tensors may share memory with their inputs (reshape,
transpose); nothing in this module mutates an array in place, and callers
must follow the same discipline while a tape is alive.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class Tensor:
    """A dense float64 array plus autodiff bookkeeping.

    ``grad`` is populated by ``backward`` (assigned, not accumulated across
    calls) and always has the same shape as ``data``. ``name`` is set when
    the tensor is registered as a Parameter.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # order="C" (not ascontiguousarray) so 0-d inputs stay 0-d
        self.data: Array = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: Array) -> "Tensor":
        # Fast path for op outputs: no copy, caller guarantees float64.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.data.shape)}{flag})"

    # Sugar for the common arithmetic; everything else is a module function.
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


class TapeNode:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered op record; every node's inputs precede it in ``nodes``."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STATE.stack.pop()
        if popped is not self:
            raise RuntimeError("tape contexts must nest properly")


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _ThreadState()


def _active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# Elementwise ops (equal shapes or Python scalar).


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname} shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = Tensor._wrap(a.data + b.data)
        return _record(out, (a, b), lambda g: (g, g))
    if isinstance(a, Tensor):
        out = Tensor._wrap(a.data + float(b))
        return _record(out, (a,), lambda g: (g,))
    return add(b, a)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = Tensor._wrap(a.data - b.data)
        return _record(out, (a, b), lambda g: (g, -g))
    if isinstance(a, Tensor):
        out = Tensor._wrap(a.data - float(b))
        return _record(out, (a,), lambda g: (g,))
    # scalar - tensor
    out = Tensor._wrap(float(a) - b.data)
    return _record(out, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = Tensor._wrap(a.data * b.data)

        def bw(g: Array):
            ga = g * b.data if a.requires_grad else None
            gb = g * a.data if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bw)
    if isinstance(a, Tensor):
        c = float(b)
        out = Tensor._wrap(a.data * c)
        return _record(out, (a,), lambda g: (g * c,))
    return mul(b, a)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at exactly 0 is 0."""
    out = Tensor._wrap(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return _record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor._wrap(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor._wrap(e)
    return _record(out, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log of non-positive input")
    out = Tensor._wrap(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    out = Tensor._wrap(np.clip(x.data, lo, hi))
    mask = (x.data > lo) & (x.data < hi)
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Row/axis ops.


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(s)

    def bw(g: Array):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor._wrap(y)
    sm = np.exp(y)

    def bw(g: Array):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each last-axis row, then apply the gamma/beta affine."""
    if eps <= 0.0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data)

    def bw(g: Array):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum()))
    return _record(out, (x,), lambda g: (g * np.ones_like(x.data),))


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# Structural ops.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, N-D x 2-D (shared weight on the right),
    or batched N-D x N-D with identical leading dims."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {A.shape} x {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {A.shape} x {B.shape}")
    if A.ndim > 2 and B.ndim == 2:
        lead = A.shape[:-1]
        A2 = A.reshape(-1, A.shape[-1])
        out = Tensor._wrap((A2 @ B).reshape(*lead, B.shape[-1]))

        def bw(g: Array):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A2.T @ g2 if b.requires_grad else None
            return ga, gb

    elif A.ndim == B.ndim:
        if A.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
            raise ShapeError(f"matmul batch dims differ: {A.shape} x {B.shape}")
        out = Tensor._wrap(A @ B)

        def bw(g: Array):
            ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    else:
        raise ShapeError(f"unsupported matmul arrangement: {A.shape} x {B.shape}")
    return _record(out, (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor._wrap(x.data.reshape(tuple(shape)))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = Tensor._wrap(x.data.transpose(axes))
    return _record(out, (x,), lambda g: (g.transpose(inv),))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d], broadcast over leading axes (bias add)."""
    d = x.shape[-1]
    if b.shape != (d,):
        raise ShapeError(f"add_rowvec needs a ({d},) vector, got {b.shape}")
    out = Tensor._wrap(x.data + b.data)

    def bw(g: Array):
        gb = g.sum(axis=tuple(range(g.ndim - 1))) if b.requires_grad else None
        return g, gb

    return _record(out, (x, b), bw)


def gather_rows(table: Tensor, ids: Array) -> Tensor:
    """Embedding lookup: out[...] = table[ids[...]]; scatter-add backward."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"gather ids outside [0, {table.shape[0]})")
    out = Tensor._wrap(table.data[ids])

    def bw(g: Array):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(out, (table,), bw)


def take_index(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along an axis (the axis is dropped)."""
    out = Tensor._wrap(np.take(x.data, index, axis=axis))

    def bw(g: Array):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _record(out, (x,), bw)


def scale_heads(s: Tensor, scales: Tensor) -> Tensor:
    """Outer product along a new head axis: out[b,h] = scales[h] * s[b]."""
    if s.data.ndim != 3 or scales.data.ndim != 1:
        raise ShapeError(f"scale_heads expects [B,m,m] and [h], got {s.shape} and {scales.shape}")
    out = Tensor._wrap(scales.data[None, :, None, None] * s.data[:, None, :, :])

    def bw(g: Array):
        gs = np.einsum("bhij,h->bij", g, scales.data) if s.requires_grad else None
        gsc = np.einsum("bhij,bij->h", g, s.data) if scales.requires_grad else None
        return gs, gsc

    return _record(out, (s, scales), bw)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"kron needs 2-D operands, got {a.shape} x {b.shape}")
    out = Tensor._wrap(np.kron(a.data, b.data))
    (n, m), (p, q) = a.shape, b.shape

    def bw(g: Array):
        g4 = g.reshape(n, p, m, q)
        ga = np.einsum("ipjq,pq->ij", g4, b.data) if a.requires_grad else None
        gb = np.einsum("ipjq,ij->pq", g4, a.data) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# Backward sweep and the finite-difference oracle.


def backward(loss: Tensor, tape: Tape) -> dict[str, Array]:
    """Reverse sweep over one tape.

    Populates ``.grad`` on every requires_grad leaf reachable from ``loss``
    (assignment semantics, one tape per call) and returns the gradients of
    named leaves keyed by name. Non-trainable leaves are skipped.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt
                holders[key] = t
    named: dict[str, Array] = {}
    for key, g in grads.items():
        t = holders[key]
        t.grad = np.asarray(g, dtype=np.float64)
        if t.name is not None:
            named[t.name] = t.grad
    return named


def finite_difference_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Returns max over all coordinates of |analytic - numeric| / max(1, |numeric|).
    A non-finite function value makes the check fail (returns inf).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    with Tape() as tape:
        loss = fn(params)
    backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f1 = float(fn(params).data)
            flat[i] = orig - h
            f2 = float(fn(params).data)
            flat[i] = orig
            if not (math.isfinite(f1) and math.isfinite(f2)):
                return math.inf
            numeric = (f1 - f2) / (2.0 * h)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Initialization and the parameter registry.


def init_params(shape: Sequence[int], scheme: str, seed) -> Tensor:
    """Deterministic init; same (shape, scheme, seed) is bit-identical
    everywhere (PCG64 stream, platform-independent)."""
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    elif scheme == "xavier_uniform":
        fan_in = shape[0] if len(shape) >= 1 else 1
        fan_out = shape[1] if len(shape) >= 2 else 1
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        rng = np.random.Generator(np.random.PCG64(seed))
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme: {scheme!r}")
    return Tensor(data, requires_grad=True)


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True
    role: str = "weight"  # weight | bias | ln | head | embed | scale | adapter

    @property
    def size(self) -> int:
        return self.tensor.size


class ParamStore:
    """Ordered registry of named parameters.

    Registration order is the canonical enumeration order for checkpoints,
    freeze masks, and optimizer state; names are hierarchical paths like
    ``enc.3.ffn.w1``. The role tag records what a parameter is (bias,
    LayerNorm affine, head, ...) so selection rules never parse names.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, tensor: Tensor, trainable: bool = True, role: str = "weight") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.name = name
        tensor.requires_grad = trainable
        self._params[name] = Parameter(name, tensor, trainable, role)
        return tensor

    def replace(self, name: str, tensor: Tensor, role: str | None = None) -> Tensor:
        """Swap a parameter's tensor in place, keeping its slot in the
        enumeration order (used when a task head is rebuilt)."""
        old = self._params[name]
        tensor.name = name
        tensor.requires_grad = old.trainable
        self._params[name] = Parameter(name, tensor, old.trainable, role or old.role)
        return tensor

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [p.name for p in self if p.trainable]

    def total_scalars(self) -> int:
        return sum(p.size for p in self)

    def trainable_scalars(self) -> int:
        return sum(p.size for p in self if p.trainable)

    def apply_mask(self, trainable: set[str]) -> None:
        unknown = trainable - set(self._params)
        if unknown:
            raise KeyError(f"mask names not in store: {sorted(unknown)}")
        for p in self._params.values():
            p.trainable = p.name in trainable
            p.tensor.requires_grad = p.trainable

    def snapshot(self, names: Sequence[str] | None = None) -> dict[str, Array]:
        picked = self.names() if names is None else list(names)
        return {n: self._params[n].tensor.data.copy() for n in picked}

    def load_snapshot(self, snap: dict[str, Array]) -> None:
        for n, arr in snap.items():
            p = self._params[n]
            if p.tensor.data.shape != arr.shape:
                raise ShapeError(f"snapshot shape mismatch for {n}: {arr.shape} vs {p.tensor.data.shape}")
            p.tensor.data = np.array(arr, dtype=np.float64, order="C")
