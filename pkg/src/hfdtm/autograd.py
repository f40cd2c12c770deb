"""Small tape-based reverse-mode differentiation over float64 numpy arrays.

Only the operations the forecasting models and losses need are provided.
Every op lives on :class:`Tape`; the tape records the op in execution order
and :meth:`Tape.backward` replays the records once, in reverse.

    tape = Tape()
    y = tape.matmul(x, w)
    loss = tape.mse(y, target)
    tape.backward(loss)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = x if isinstance(x, np.ndarray) and x.dtype == np.float64 else np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t.name = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops.

    With ``record=False`` the ops only compute forward values, which is what
    evaluation loops want.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.name = None
        out.grad = None
        out.requires_grad = self.record and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            self.nodes.append(_Node(out, inputs, backward))
            self._produced.add(id(out))
        return out

    # -- linear algebra -------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = a.data.T @ g if b.requires_grad else None
            return ga, gb

        return self._emit(a.data @ b.data, (a, b), backward)

    def linear(self, x, w, b) -> Tensor:
        """``x @ w + b`` with ``b`` broadcast over rows."""
        return self.add(self.matmul(x, w), b)

    # -- elementwise ----------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        try:
            out = a.data + b.data
        except ValueError:
            raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}") from None
        return self._emit(out, (a, b), backward)

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        try:
            out = a.data - b.data
        except ValueError:
            raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}") from None
        return self._emit(out, (a, b), backward)

    def mul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        try:
            out = a.data * b.data
        except ValueError:
            raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}") from None
        return self._emit(out, (a, b), backward)

    def scale(self, a, c: float) -> Tensor:
        a = _as_tensor(a)
        c = float(c)
        return self._emit(a.data * c, (a,), lambda g: (g * c,))

    def tanh(self, a) -> Tensor:
        a = _as_tensor(a)
        y = np.tanh(a.data)
        return self._emit(y, (a,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a) -> Tensor:
        a = _as_tensor(a)
        # tanh form avoids overflow warnings for large |x|
        y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
        return self._emit(y, (a,), lambda g: (g * y * (1.0 - y),))

    def relu(self, a) -> Tensor:
        a = _as_tensor(a)
        on = a.data > 0
        return self._emit(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))

    # -- structural -----------------------------------------------------

    def concat(self, tensors: Sequence, axis: int = -1) -> Tensor:
        ts = tuple(_as_tensor(t) for t in tensors)
        if not ts:
            raise ShapeError("concat of zero tensors")
        try:
            out = np.concatenate([t.data for t in ts], axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
        splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._emit(out, ts, backward)

    def take(self, a, index) -> Tensor:
        """Copy of the columns ``index`` along the last axis.

        ``index`` may be a slice or an integer index set; backward scatters
        into the selected positions (repeated indices accumulate).
        """
        a = _as_tensor(a)
        if isinstance(index, slice):
            def backward(g):
                full = np.zeros_like(a.data)
                full[..., index] = g
                return (full,)

            return self._emit(a.data[..., index].copy(), (a,), backward)

        idx = np.asarray(index, dtype=np.intp)
        n = a.shape[-1]
        if idx.size and (idx.min() < -n or idx.max() >= n):
            raise IndexError(f"column index out of range for width {n}")

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (..., idx), g)
            return (full,)

        return self._emit(a.data[..., idx], (a,), backward)

    def embedding(self, table, index) -> Tensor:
        """Row lookup. Integer index -> ``(H,)``; index array -> ``(B, H)``."""
        table = _as_tensor(table)
        if table.data.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
        idx = np.asarray(index)
        if not np.issubdtype(idx.dtype, np.integer):
            raise TypeError("embedding index must be integer")
        v = table.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= v):
            raise IndexError(f"embedding index out of range [0, {v})")

        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            return (full,)

        return self._emit(table.data[idx].copy(), (table,), backward)

    # -- reductions -----------------------------------------------------

    def sum_cols(self, a, index) -> Tensor:
        """Row-wise sum over the column set ``index``: ``(B, n) -> (B, 1)``."""
        a = _as_tensor(a)
        idx = np.asarray(index, dtype=np.intp)
        if idx.size == 0:
            raise ValueError("sum over an empty index set")

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, (..., idx), np.broadcast_to(g, a.shape[:-1] + (idx.size,)))
            return (full,)

        return self._emit(a.data[..., idx].sum(axis=-1, keepdims=True), (a,), backward)

    def sum(self, a) -> Tensor:
        a = _as_tensor(a)
        return self._emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))

    def mean(self, a) -> Tensor:
        a = _as_tensor(a)
        n = a.data.size

        def backward(g):
            return (np.full(a.shape, float(g) / n),)

        return self._emit(np.asarray(a.data.mean()), (a,), backward)

    def mse(self, a, b) -> Tensor:
        """Mean of squared differences over every element."""
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
        diff = a.data - b.data
        n = diff.size

        def backward(g):
            ga = (2.0 * float(g) / n) * diff
            return ga, -ga

        return self._emit(np.asarray(np.mean(diff * diff)), (a, b), backward)

    # -- reverse pass ---------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf on this tape.

        Leaf gradients are added to, never reset; call ``zero_grad`` between
        optimizer steps.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
        # free intermediate buffers; a tape is replayed at most once
        for node in self.nodes:
            node.out.grad = None
        self.nodes.clear()
        self._produced.clear()


def numeric_grad(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` w.r.t. ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(build: Callable[[Tape], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Compare reverse-mode and central-difference gradients.

    ``build`` constructs the scalar loss on the tape it is given. Returns one
    relative error per entry of ``params``.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build(tape)
    tape.backward(loss)

    def f() -> float:
        return float(build(Tape(record=False)).data)

    return [relative_error(p.grad, numeric_grad(f, p, eps)) for p in params]
