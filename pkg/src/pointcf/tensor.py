"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: row-major numpy buffers, a fresh graph of backward
closures per forward pass, and a central-difference gradient checker that
serves as the oracle for every differentiable operator in the package.
No broadcasting beyond what the point-cloud operators need, no views that
alias writable memory, 64-bit floats everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

POINTWISE_FNS = ("sigmoid", "relu", "softmax_over_last", "identity")


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """Operation invoked outside its contract (e.g. backward on a non-scalar)."""


class DeterminismError(RuntimeError):
    """A closure that must be deterministic returned two different values."""


class Tensor:
    """Dense float64 array with an optional gradient accumulator.

    Tensors produced by operations carry back-references to their inputs;
    calling :func:`backward` on a scalar walks that graph once in reverse
    topological order. Buffers are never mutated in place by operations.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{req})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, _lift(other))

    def __radd__(self, other) -> "Tensor":
        return add(_lift(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, _lift(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _lift(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_lift(other), self)

    def __neg__(self) -> "Tensor":
        return mul(self, Tensor(-1.0))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), Tensor(1.0 / self.data.size))

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


@dataclass(frozen=True)
class GraphNode:
    """One entry of the topologically ordered graph view."""

    op: str
    tensor_id: int
    input_ids: tuple[int, ...]


def graph_nodes(output: Tensor) -> list[GraphNode]:
    """Topologically ordered node list of the graph below ``output``.

    Every node's inputs precede it; leaves carry the tag ``leaf``.
    """
    order = _topo_order(output)
    return [GraphNode(t._op, id(t), tuple(id(p) for p in t._parents)) for t in order]


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[Array], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(t: Tensor, g: Array, share: bool = False) -> None:
    """Add ``g`` to ``t.grad``.

    ``share=True`` lets a fresh (or single-alias-safe) buffer be adopted
    directly as the initial gradient; a consumer's grad buffer is never read
    again after its own backward ran, so one parent per op may alias it.
    Callers that hand the same upstream buffer to two parents must leave
    ``share`` False for all but one of them.
    """
    if not t.requires_grad:
        return
    g2 = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        if g2 is not g:
            # reductions allocate; broadcast views are read-only and need a copy
            t.grad = g2 if g2.flags.writeable else np.array(g2)
        elif share and g.flags.writeable:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g2


# -- elementwise ops ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(a, g, share=True)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(a, g, share=True)
        _accum(b, -g, share=True)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(a, g * b.data, share=True)
        _accum(b, g * a.data, share=True)

    return _make(a.data * b.data, (a, b), "mul", bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum()), (x,), "sum", bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}")

    def bw(g: Array) -> None:
        _accum(x, g.reshape(x.data.shape), share=True)

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last needs ndim >= 2, got shape {x.data.shape}")

    def bw(g: Array) -> None:
        _accum(x, np.swapaxes(g, -1, -2), share=True)

    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), "transpose_last", bw)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_last leading shapes differ: {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[-1]

    def bw(g: Array) -> None:
        # disjoint slices of the consumer's buffer: both aliases are safe
        _accum(a, g[..., :split], share=True)
        _accum(b, g[..., split:], share=True)

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), "concat_last", bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not agree: {a.data.shape} and {b.data.shape}")

    def bw(g: Array) -> None:
        _accum(a, g @ b.data.T, share=True)
        _accum(b, a.data.T @ g, share=True)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]
            or a.data.shape[2] != b.data.shape[1]):
        raise ShapeError(f"bmm shapes do not agree: {a.data.shape} and {b.data.shape}")

    def bw(g: Array) -> None:
        _accum(a, g @ np.swapaxes(b.data, -1, -2), share=True)
        _accum(b, np.swapaxes(a.data, -1, -2) @ g, share=True)

    return _make(a.data @ b.data, (a, b), "bmm", bw)


# -- gather / reduce ----------------------------------------------------------

def gather_rows(src: Tensor, idx: Array) -> Tensor:
    """out[n,k,:] = src[idx[n,k],:]; backward scatter-adds into src.grad."""
    idx = np.asarray(idx)
    if src.data.ndim != 2:
        raise ShapeError(f"gather_rows source must be 2-d, got {src.data.shape}")
    if idx.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows index table must be an integer N x K array, got {idx.shape}")
    m = src.data.shape[0]
    bad = (idx < 0) | (idx >= m)
    if bad.any():
        n, k = np.argwhere(bad)[0]
        raise IndexError(f"gather_rows index {idx[n, k]} out of range [0, {m}) at slot ({n}, {k})")
    idx = idx.astype(np.int64, copy=False)

    def bw(g: Array) -> None:
        if not src.requires_grad:
            return
        m, c = src.data.shape
        # one bincount over (row, channel) pairs: a deterministic scatter-add
        combined = (idx.reshape(-1, 1) * c + np.arange(c)).reshape(-1)
        pooled = np.bincount(combined, weights=g.reshape(-1), minlength=m * c)
        if src.grad is None:
            src.grad = pooled.reshape(m, c)
        else:
            src.grad += pooled.reshape(m, c)

    return _make(src.data[idx], (src,), "gather_rows", bw)


def neighborhood_reduce(x: Tensor) -> Tensor:
    """Sum an [N,K,c] block over the K axis."""
    if x.data.ndim != 3:
        raise ShapeError(f"neighborhood_reduce expects N x K x c, got {x.data.shape}")

    def bw(g: Array) -> None:
        _accum(x, np.broadcast_to(g[:, None, :], x.data.shape))

    return _make(x.data.sum(axis=1), (x,), "neighborhood_reduce", bw)


def sum_over_last(x: Tensor) -> Tensor:
    def bw(g: Array) -> None:
        _accum(x, np.broadcast_to(g[..., None], x.data.shape))

    return _make(x.data.sum(axis=-1), (x,), "sum_over_last", bw)


def mean_over_rows(x: Tensor) -> Tensor:
    """Column means of a 2-d tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_over_rows expects a 2-d tensor, got {x.data.shape}")
    n = x.data.shape[0]

    def bw(g: Array) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _make(x.data.mean(axis=0), (x,), "mean_over_rows", bw)


def pow_const(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent (x must stay positive
    for fractional exponents)."""
    y = x.data ** exponent

    def bw(g: Array) -> None:
        _accum(x, g * (exponent * x.data ** (exponent - 1.0)), share=True)

    return _make(y, (x,), f"pow:{exponent}", bw)


def max_over_neighbors(x: Tensor) -> Tensor:
    """Per-channel max of an [N,K,c] block over K; ties route to the first slot."""
    if x.data.ndim != 3:
        raise ShapeError(f"max_over_neighbors expects N x K x c, got {x.data.shape}")
    am = np.argmax(x.data, axis=1)

    def bw(g: Array) -> None:
        if not x.requires_grad:
            return
        local = np.zeros_like(x.data)
        np.put_along_axis(local, am[:, None, :], g[:, None, :], axis=1)
        _accum(x, local, share=True)

    return _make(np.take_along_axis(x.data, am[:, None, :], axis=1)[:, 0, :], (x,),
                 "max_over_neighbors", bw)


def mean_pool(src: Tensor, inverse: Array, groups: int) -> Tensor:
    """Group means of rows: out[g] = mean of src rows with inverse == g.

    Every group in [0, groups) must be hit by at least one row.
    """
    inverse = np.asarray(inverse)
    if src.data.ndim != 2 or inverse.shape != (src.data.shape[0],):
        raise ShapeError(f"mean_pool got {src.data.shape} with index shape {inverse.shape}")
    counts = np.bincount(inverse, minlength=groups).astype(np.float64)
    if (counts == 0).any():
        raise ShapeError(f"mean_pool group {int(np.argwhere(counts == 0)[0][0])} is empty")
    sums = np.zeros((groups, src.data.shape[1]))
    np.add.at(sums, inverse, src.data)

    def bw(g: Array) -> None:
        _accum(src, g[inverse] / counts[inverse, None], share=True)

    return _make(sums / counts[:, None], (src,), "mean_pool", bw)


def take_per_row(x: Tensor, idx: Array) -> Tensor:
    """out[n] = x[n, idx[n]] for a 2-d tensor."""
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise ShapeError(f"take_per_row got {x.data.shape} with index shape {idx.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.data.shape[1]:
        bad = int(np.argwhere((idx < 0) | (idx >= x.data.shape[1]))[0][0])
        raise IndexError(f"take_per_row index {idx[bad]} out of range at row {bad}")
    rows = np.arange(x.data.shape[0])

    def bw(g: Array) -> None:
        if not x.requires_grad:
            return
        local = np.zeros_like(x.data)
        local[rows, idx] = g
        _accum(x, local, share=True)

    return _make(x.data[rows, idx], (x,), "take_per_row", bw)


# -- activations --------------------------------------------------------------

def _sigmoid(x: Array) -> Array:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax_last(x: Array) -> Array:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Elementwise activation; softmax normalizes each row of the last axis."""
    if fn == "sigmoid":
        y = _sigmoid(x.data)

        def bw(g: Array) -> None:
            _accum(x, g * y * (1.0 - y), share=True)

    elif fn == "relu":
        y = np.maximum(x.data, 0.0)

        def bw(g: Array) -> None:
            _accum(x, g * (x.data > 0.0), share=True)

    elif fn == "softmax_over_last":
        y = _softmax_last(x.data)

        def bw(g: Array) -> None:
            _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)), share=True)

    elif fn == "identity":
        y = x.data

        def bw(g: Array) -> None:
            _accum(x, g, share=True)

    else:
        raise ValueError(f"unknown pointwise fn {fn!r}; expected one of {POINTWISE_FNS}")
    return _make(y, (x,), f"pointwise:{fn}", bw)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def bw(g: Array) -> None:
        _accum(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True), share=True)

    return _make(y, (x,), "log_softmax", bw)


# -- backward pass ------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into every reachable requires_grad tensor.

    Repeated calls without zeroing gradients accumulate: each call adds its
    own full contribution on top of whatever the tensors already hold.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    carried = [t.grad for t in order]
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t, prev in zip(order, carried):
        if prev is not None:
            t.grad = prev if t.grad is None else t.grad + prev


# -- gradient checking ---------------------------------------------------------

def grad_check(builder: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-6, max_samples: int = 512) -> float:
    """Compare analytic gradients against central finite differences.

    ``builder`` must deterministically rebuild a scalar loss from the current
    contents of ``params``. Parameters with more than ``max_samples`` elements
    are probed at a fixed-seed random subset. Returns the worst relative error
    with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base1 = float(builder().data)
    base2 = float(builder().data)
    if base1 != base2:
        raise DeterminismError(
            f"builder is not deterministic: {base1!r} != {base2!r}")

    for p in params:
        p.zero_grad()
    loss = builder()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    rng = np.random.default_rng(0)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        n = flat.size
        if n > max_samples:
            probe = np.sort(rng.choice(n, size=max_samples, replace=False))
        else:
            probe = np.arange(n)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(builder().data)
            flat[i] = orig - step
            f_minus = float(builder().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
