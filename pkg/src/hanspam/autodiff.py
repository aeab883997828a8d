"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: exactly what a hierarchical GRU/attention
classifier with convolutional feature stacks needs. All arithmetic is 64-bit;
gradient checking needs the headroom. A ``Tape`` records operations in forward
(topological) order; ``backward`` replays the local rules in reverse and
accumulates into ``Tensor.grad``. Embedding tables get sparse row gradients so
a lookup never materializes a table-sized dense array.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ParameterError",
    "EmptyAttentionError",
    "backward",
    "tensor",
    "add",
    "mul",
    "sub",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "log",
    "clip",
    "concat",
    "reshape",
    "take_rows",
    "take_cols",
    "tsum",
    "tmean",
    "masked_softmax",
    "dilated_conv1d",
    "dropout",
    "dropout_mask",
    "embedding_lookup",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """An operation parameter (dilation, dropout rate, ...) is out of range."""


class EmptyAttentionError(ValueError):
    """A softmax was requested over a mask with no valid positions."""


Array = np.ndarray


class Tensor:
    """A dense float64 array plus a gradient accumulator.

    ``requires_grad`` marks trainable leaves; outputs of recorded operations
    inherit it. ``grad`` matches ``data`` in shape and starts at zero;
    repeated backward passes accumulate into it until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if isinstance(g, SparseRows):
            np.add.at(self.grad, g.idx, g.val)
        else:
            self.grad += g

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


@dataclass
class SparseRows:
    """Row-indexed gradient for a 2-D table: ``dense[idx[i]] += val[i]``."""

    idx: Array
    val: Array
    shape: tuple[int, ...]

    def to_dense(self) -> Array:
        out = np.zeros(self.shape, dtype=np.float64)
        np.add.at(out, self.idx, self.val)
        return out

    def merge(self, other: "SparseRows") -> "SparseRows":
        return SparseRows(
            np.concatenate([self.idx, other.idx]),
            np.concatenate([self.val, other.val]),
            self.shape,
        )


@dataclass
class TapeEntry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[Array], Sequence["Array | SparseRows | None"]]


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one thread of forward execution.

    Entries are appended in forward order, so every entry's inputs were
    produced earlier on the tape (or are leaves); replaying the local rules
    in reverse yields exact chain-rule gradients.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor on the tape.

    ``loss`` must be a scalar. Calling twice without ``zero_grad`` doubles the
    accumulated gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    flow: dict[Tensor, Array | SparseRows] = {loss: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = flow.pop(entry.output, None)
        if g is None:
            continue
        if isinstance(g, SparseRows):
            g = g.to_dense()
        entry.output.accumulate_grad(g)
        for inp, gi in zip(entry.inputs, entry.rule(g)):
            if gi is None or not inp.requires_grad:
                continue  # constants need no flow; recorded outputs all require grad
            prev = flow.get(inp)
            if prev is None:
                flow[inp] = gi
            elif isinstance(prev, SparseRows) and isinstance(gi, SparseRows):
                flow[inp] = prev.merge(gi)
            elif isinstance(gi, SparseRows):
                flow[inp] = gi.to_dense() + prev
            elif isinstance(prev, SparseRows):
                flow[inp] = prev.to_dense() + gi
            else:
                flow[inp] = prev + gi
    for t, g in flow.items():
        if t.requires_grad:
            t.accumulate_grad(g)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: tuple[Tensor, ...], out_data: Array, rule) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(inputs, out, rule))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, rule)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, rule)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def matmul(a, b) -> Tensor:
    """Matrix/vector product with numpy semantics for 1-D and 2-D operands."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ad, bd = a.data, b.data
        if a.ndim == 2 and b.ndim == 2:
            return g @ bd.T, ad.T @ g
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        return g * bd, g * ad  # 1-D @ 1-D -> scalar

    return _record((a, b), out, rule)


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _record((x,), y, rule)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def rule(g):
        return (g * y * (1.0 - y),)

    return _record((x,), y, rule)


def relu(x) -> Tensor:
    x = _wrap(x)
    y = np.maximum(x.data, 0.0)

    def rule(g):
        return (g * (x.data > 0.0),)

    return _record((x,), y, rule)


def log(x, clamp_min: float = 0.0) -> Tensor:
    """Natural log; inputs below ``clamp_min`` are clamped (zero gradient there)."""
    x = _wrap(x)
    d = np.maximum(x.data, clamp_min) if clamp_min > 0 else x.data
    y = np.log(d)

    def rule(g):
        gx = g / d
        if clamp_min > 0:
            gx = gx * (x.data >= clamp_min)
        return (gx,)

    return _record((x,), y, rule)


def clip(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    y = np.clip(x.data, lo, hi)

    def rule(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _record((x,), y, rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_wrap(t) for t in tensors)
    if not parts:
        raise ParameterError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _record(parts, out, rule)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.shape),)

    return _record((x,), out, rule)


def take_rows(x, idx) -> Tensor:
    """Gather rows of a 2-D tensor; the backward rule scatter-adds sparsely."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def rule(g):
        return (SparseRows(idx, g, x.shape),)

    return _record((x,), out, rule)


def take_cols(x, idx) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[:, idx]

    def rule(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx.T, idx, g.T)
        return (gx,)

    return _record((x,), out, rule)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record((x,), out, rule)


def tmean(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    n = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _record((x,), out, rule)


def masked_softmax(scores, mask=None, empty: str = "error") -> Tensor:
    """Exp-normalize over valid positions; masked-out positions are exactly zero.

    Works on a vector or row-wise on a matrix. A row with no valid position
    raises ``EmptyAttentionError`` unless ``empty='zero'``, which yields an
    all-zero row (used internally for padding-only rows that downstream masks
    discard).
    """
    x = _wrap(scores)
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.shape:
            raise ShapeError(f"mask shape {m.shape} != scores shape {x.shape}")
    if x.ndim not in (1, 2):
        raise ShapeError(f"masked_softmax expects a vector or matrix, got {x.shape}")
    if empty not in ("error", "zero"):
        raise ParameterError(f"unknown empty mode {empty!r}")

    rowwise = x.ndim == 2
    valid_any = m.any(axis=-1)
    if not np.all(valid_any) and empty == "error":
        raise EmptyAttentionError("softmax over a mask with no valid positions")

    neg = np.where(m, x.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True) if rowwise else neg.max()
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(neg - mx), 0.0)
    z = e.sum(axis=-1, keepdims=rowwise)
    zsafe = np.where(z == 0.0, 1.0, z)
    y = e / zsafe

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=rowwise)
        return (y * (g - dot),)

    return _record((x,), y, rule)


def dilated_conv1d(x, f, d: int = 1, mode: str = "valid") -> Tensor:
    """Causal dilated convolution of a 1-D signal with a 1-D kernel.

    ``out[s] = sum_i f[i] * x[s - d*i]``. In ``valid`` mode only positions
    with a full window are produced (length ``n - (k-1)*d``); ``same`` mode
    left-pads with zeros to keep length ``n``.
    """
    x, f = _wrap(x), _wrap(f)
    if x.ndim != 1 or f.ndim != 1:
        raise ShapeError(f"dilated_conv1d expects vectors, got x{x.shape}, f{f.shape}")
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ParameterError(f"dilation must be a positive integer, got {d}")
    k, n = f.size, x.size
    if k < 1:
        raise ParameterError("kernel must have at least one tap")
    if mode not in ("valid", "same"):
        raise ParameterError(f"unknown mode {mode!r}")
    span = (k - 1) * d
    if mode == "valid" and n < span + 1:
        raise ShapeError(f"input length {n} has no full window for k={k}, d={d}")

    length = n - span if mode == "valid" else n
    base = span if mode == "valid" else 0
    out = np.zeros(length, dtype=np.float64)
    for i in range(k):
        lo = base - d * i  # x-index of output position 0 for tap i
        xs = max(lo, 0)
        js = xs - lo
        if js >= length:
            continue
        seg = x.data[xs : lo + length]
        out[js : js + seg.size] += f.data[i] * seg

    def rule(g):
        gx = np.zeros(n, dtype=np.float64)
        gf = np.zeros(k, dtype=np.float64)
        for i in range(k):
            lo = base - d * i
            xs = max(lo, 0)
            js = xs - lo
            if js >= length:
                continue
            stop = lo + length
            gx[xs:stop] += f.data[i] * g[js : js + (stop - xs)]
            gf[i] = np.dot(x.data[xs:stop], g[js : js + (stop - xs)])
        return gx, gf

    return _record((x, f), out, rule)


def dropout_mask(shape, p: float, seed: int, step: int, salt: int = 0) -> Array:
    """Deterministic keep/scale mask: the (seed, step, salt) triple fixes it."""
    bitgen = np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF, counter=[step, salt, 0, 0])
    u = np.random.Generator(bitgen).random(shape)
    return (u >= p) / (1.0 - p)


def dropout(x, p: float, seed: int = 0, step: int = 0, salt: int = 0, training: bool = True) -> Tensor:
    """Zero each element with probability ``p`` and scale survivors by 1/(1-p).

    Identity when ``training`` is false or ``p`` is zero.
    """
    if not (0.0 <= p < 1.0):
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    scale = dropout_mask(x.shape, p, seed, step, salt)
    y = x.data * scale

    def rule(g):
        return (g * scale,)

    return _record((x,), y, rule)


def embedding_lookup(
    word_table: Tensor,
    bucket_table: Tensor,
    word_ids,
    word_weight,
    bucket_ids,
    bucket_offsets,
) -> Tensor:
    """Compose token vectors: ``weight * word_row + mean(bucket rows)``.

    ``bucket_ids``/``bucket_offsets`` are a CSR-style ragged list: row ``r``
    owns ``bucket_ids[bucket_offsets[r]:bucket_offsets[r+1]]``. Rows with no
    buckets and zero weight (padding) come out exactly zero. Gradients reach
    both tables as sparse row updates.
    """
    ids = np.asarray(word_ids, dtype=np.intp)
    w = np.asarray(word_weight, dtype=np.float64)
    bidx = np.asarray(bucket_ids, dtype=np.intp)
    offs = np.asarray(bucket_offsets, dtype=np.intp)
    n = ids.size
    counts = np.diff(offs)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    rows = np.repeat(np.arange(n), counts)

    out = w[:, None] * word_table.data[ids]
    if bidx.size:
        np.add.at(out, rows, inv[rows, None] * bucket_table.data[bidx])

    def rule(g):
        keep = w > 0
        gw = SparseRows(ids[keep], g[keep] * w[keep, None], word_table.shape)
        if bidx.size:
            gb = SparseRows(bidx, g[rows] * inv[rows, None], bucket_table.shape)
        else:
            gb = SparseRows(np.empty(0, dtype=np.intp), np.empty((0, bucket_table.shape[1])), bucket_table.shape)
        return gw, gb

    return _record((word_table, bucket_table), out, rule)
