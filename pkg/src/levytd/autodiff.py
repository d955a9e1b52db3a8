"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the innermost active :class:`Tape`. Every
vector-Jacobian product is itself written with recorded primitives, so a
gradient taken with ``create_graph=True`` can be differentiated again. The
solver relies on that to train through the input gradient of the network.
"""

from __future__ import annotations

import contextlib
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "abs",
    "add",
    "affine",
    "backward",
    "batched_matvec",
    "broadcast_to",
    "concat",
    "getitem",
    "matmul",
    "mean",
    "mul",
    "no_record",
    "reshape",
    "scale",
    "scatter_add",
    "segment_sum",
    "sub",
    "sum",
    "sum_squares",
    "sum_to",
    "tanh",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


# innermost entry wins; ``None`` pauses recording
_ACTIVE: list[Tape | None] = []


def _current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_record():
    """Evaluate operations without recording them on any tape."""
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


class _Node:
    __slots__ = ("out", "parents", "vjp", "index")

    def __init__(self, out, parents, vjp, index):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.index = index


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._node = None
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, vjp, len(tape.nodes))
        tape.nodes.append(node)
        out._node = node
    else:
        out.requires_grad = False
    return out


class Tape:
    """Records primitive operations in execution (hence topological) order.

    Use as a context manager; the tape stays usable for any number of
    :meth:`gradient` calls after the block exits.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _owns(self, t: Tensor) -> bool:
        node = t._node
        return node is not None and node.index < len(self.nodes) and self.nodes[node.index] is node

    def gradient(
        self,
        root: Tensor,
        sources: Sequence[Tensor],
        create_graph: bool = False,
    ) -> list[Tensor]:
        """Return d(root)/d(source) for every source, zeros where unreachable.

        With ``create_graph`` the adjoint computation is recorded on this tape
        so the returned gradients are themselves differentiable.
        """
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        sources = list(sources)
        zeros = [Tensor(np.zeros_like(s.data)) for s in sources]
        if not self._owns(root):
            return zeros

        stop = root._node.index
        relevant = {id(s) for s in sources}
        live: list[_Node] = []
        for node in self.nodes[: stop + 1]:
            for p in node.parents:
                if id(p) in relevant:
                    relevant.add(id(node.out))
                    live.append(node)
                    break
        if id(root) not in relevant:
            return zeros

        source_ids = {id(s) for s in sources}
        adjoints: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
        ctx = _recording(self) if create_graph else no_record()
        with ctx:
            for node in reversed(live):
                key = id(node.out)
                g = adjoints.get(key) if key in source_ids else adjoints.pop(key, None)
                if g is None:
                    continue
                mask = tuple(id(p) in relevant for p in node.parents)
                for p, pg, wanted in zip(node.parents, node.vjp(g, mask), mask):
                    if not wanted or pg is None:
                        continue
                    k = id(p)
                    prev = adjoints.get(k)
                    adjoints[k] = pg if prev is None else add(prev, pg)
        return [adjoints.get(id(s), z) for s, z in zip(sources, zeros)]

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring tensors used on this tape but not produced by it."""
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and not self._owns(p):
                    seen.setdefault(id(p), p)
        return list(seen.values())


@contextlib.contextmanager
def _recording(tape: Tape):
    _ACTIVE.append(tape)
    try:
        yield
    finally:
        _ACTIVE.pop()


def backward(
    tape: Tape,
    root: Tensor,
    sources: Iterable[Tensor] | None = None,
    create_graph: bool = False,
) -> dict[Tensor, Tensor]:
    """Gradient map from each source (default: every leaf on the tape) to its adjoint."""
    srcs = tape.leaves() if sources is None else list(sources)
    grads = tape.gradient(root, srcs, create_graph=create_graph)
    return dict(zip(srcs, grads))


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast result back down to ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g, mask):
        return (broadcast_to(g, src_shape),)

    return _result(data.reshape(shape), (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape

    def vjp(g, mask):
        return (sum_to(g, src_shape),)

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, mask):
        return (sum_to(g, sa) if mask[0] else None, sum_to(g, sb) if mask[1] else None)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g, mask):
        return (sum_to(g, sa) if mask[0] else None, sum_to(scale(g, -1.0), sb) if mask[1] else None)

    return _result(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g, mask):
        return (
            sum_to(mul(g, b), a.shape) if mask[0] else None,
            sum_to(mul(g, a), b.shape) if mask[1] else None,
        )

    return _result(a.data * b.data, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def vjp(g, mask):
        return (scale(g, c),)

    return _result(a.data * c, (a,), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")

    def vjp(g, mask):
        return (transpose(g),)

    return _result(a.data.T, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src_shape = a.shape

    def vjp(g, mask):
        return (reshape(g, src_shape),)

    return _result(a.data.reshape(shape), (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))

    def vjp(g, mask):
        return (
            matmul(g, transpose(b)) if mask[0] else None,
            matmul(transpose(a), g) if mask[1] else None,
        )

    return _result(a.data @ b.data, (a, b), vjp)


def affine(W, x, b) -> Tensor:
    """Row-batched dense layer ``x @ W.T + b`` with ``W`` stored (out, in)."""
    W, x, b = _as_tensor(W), _as_tensor(x), _as_tensor(b)
    if W.ndim != 2 or x.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine: incompatible shapes W{W.shape}, x{x.shape}, b{b.shape}"
        )

    def vjp(g, mask):
        return (
            matmul(transpose(g), x) if mask[0] else None,
            matmul(g, W) if mask[1] else None,
            sum(g, axis=0) if mask[2] else None,
        )

    return _result(x.data @ W.data.T + b.data, (W, x, b), vjp)


def _tanh_backward(g: Tensor, y: Tensor, dy: np.ndarray) -> Tensor:
    # g * (1 - y^2) as one node; dy caches 1 - y^2
    def vjp(gg, mask):
        return (
            _tanh_backward(gg, y, dy) if mask[0] else None,
            scale(mul(mul(gg, g), y), -2.0) if mask[1] else None,
        )

    return _result(g.data * dy, (g, y), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    dy = 1.0 - y * y
    ref = None

    def vjp(g, mask):
        # weak reference: the tape owns the output, a strong one would form a cycle
        return (_tanh_backward(g, ref(), dy),)

    out = _result(y, (a,), vjp)
    ref = weakref.ref(out)
    return out


def abs(a) -> Tensor:  # noqa: A001
    """Elementwise magnitude; the subgradient at zero is zero."""
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def vjp(g, mask):
        return (mul(g, sign),)

    return _result(np.abs(a.data), (a,), vjp)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src_shape = a.shape
    kept_shape = np.sum(a.data, axis=axis, keepdims=True).shape

    def vjp(g, mask):
        return (broadcast_to(reshape(g, kept_shape), src_shape),)

    if axis == 0 and a.ndim == 2:
        # BLAS row reduction, much faster than ufunc.reduce on tall arrays
        data = np.ones(a.shape[0]) @ a.data
        if keepdims:
            data = data[None, :]
    else:
        data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(data, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_squares(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, mask):
        return (scale(mul(g, a), 2.0),)

    return _result(np.asarray(np.sum(a.data * a.data)), (a,), vjp)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def scatter_add(values, index, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``values`` accumulated at ``index``."""
    values = _as_tensor(values)
    data = np.zeros(shape)
    if _is_fancy(index):
        np.add.at(data, index, values.data)
    else:
        data[index] += values.data

    def vjp(g, mask):
        return (getitem(g, index),)

    return _result(data, (values,), vjp)


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    src_shape = a.shape

    def vjp(g, mask):
        return (scatter_add(g, index, src_shape),)

    return _result(np.array(a.data[index]), (a,), vjp)


def segment_sum(values, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets by ``segment_ids``."""
    values = _as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if ids.shape[0] != values.shape[0]:
        raise DimensionError(f"segment_sum: {ids.shape} ids for values {values.shape}")
    return scatter_add(values, ids, (num_segments,) + values.shape[1:])


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + " and ".join(str(t.shape) for t in ts)
        ) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g, mask):
        out = []
        for i, wanted in enumerate(mask):
            if not wanted:
                out.append(None)
                continue
            idx = [slice(None)] * data.ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _result(data, tuple(ts), vjp)


def batched_matvec(v, A: np.ndarray) -> Tensor:
    """``out[m, j] = sum_i v[m, i] * A[m, i, j]`` for a constant ``A``.

    A 2-D ``A`` is shared by every row.
    """
    v = _as_tensor(v)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        return matmul(v, Tensor(A))
    if A.ndim != 3 or A.shape[0] != v.shape[0] or A.shape[1] != v.shape[1]:
        raise DimensionError(f"batched_matvec: incompatible shapes {v.shape} and {A.shape}")
    At = np.ascontiguousarray(A.transpose(0, 2, 1))

    def vjp(g, mask):
        return (batched_matvec(g, At),)

    return _result(np.einsum("mi,mij->mj", v.data, A), (v,), vjp)
