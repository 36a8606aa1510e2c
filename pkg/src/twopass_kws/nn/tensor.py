"""Numpy-backed tensors with reverse-mode automatic differentiation.

Only the operations the rest of the package needs are implemented; shapes
are checked strictly and broadcasting is limited to scalars and 1-D bias
vectors added to matrix rows. Default precision is float32; gradient tests
switch to float64 via `using_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype: {dtype}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default floating-point precision."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (forward-only inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED:
            tracked = tuple(p for p in parents if p.requires_grad)
            if tracked:
                out.requires_grad = True
                out._parents = tracked
                out._backward = backward
                return out
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, seed=None) -> None:
        if seed is None:
            if self.data.ndim != 0:
                raise ValueError("backward() without a seed requires a scalar output")
            self.grad = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")
            self.grad = seed.copy()
        for node in reversed(self._topo_order()):
            if node._backward is not None:
                node._backward()

    def _topo_order(self) -> list:
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    # Operator sugar; scalars only on the right.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out_data = a.data + a.data.dtype.type(b)

        def backward():
            a.accum_grad(out.grad)

        out = Tensor._from_op(out_data, (a,), backward)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def backward():
            if a.requires_grad:
                a.accum_grad(out.grad)
            if b.requires_grad:
                b.accum_grad(out.grad)

        out = Tensor._from_op(out_data, (a, b), backward)
        return out
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]:
        out_data = a.data + b.data  # bias broadcast over leading axes

        def backward():
            if a.requires_grad:
                a.accum_grad(out.grad)
            if b.requires_grad:
                axes = tuple(range(out.grad.ndim - 1))
                b.accum_grad(out.grad.sum(axis=axes))

        out = Tensor._from_op(out_data, (a, b), backward)
        return out
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = -a.data

    def backward():
        a.accum_grad(-out.grad)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = a.data.dtype.type(b)
        out_data = a.data * s

        def backward():
            a.accum_grad(out.grad * s)

        out = Tensor._from_op(out_data, (a,), backward)
        return out
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(out.grad * b.data)
        if b.requires_grad:
            b.accum_grad(out.grad * a.data)

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accum_grad(a.data.T @ out.grad)

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    out_data = a.data.T.copy()

    def backward():
        a.accum_grad(out.grad.T)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if len(axes) != a.data.ndim:
        raise ShapeError(f"permute: {axes} does not match ndim {a.data.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def backward():
        a.accum_grad(out.grad.transpose(inverse))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading axis: (B,n,k) @ (B,k,m) -> (B,n,m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(out.grad @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b.accum_grad(a.data.transpose(0, 2, 1) @ out.grad)

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def take_per_head(table: Tensor, idx: np.ndarray) -> Tensor:
    """Index a (H, B) table with an (n, m) bucket matrix -> (H, n, m)."""
    table = _as_tensor(table)
    if table.data.ndim != 2 or idx.ndim != 2:
        raise ShapeError("take_per_head expects a (H,B) table and (n,m) indices")
    out_data = table.data[:, idx]

    def backward():
        g = np.zeros_like(table.data)
        for h in range(table.data.shape[0]):
            np.add.at(g[h], idx, out.grad[h])
        table.accum_grad(g)

    out = Tensor._from_op(out_data, (table,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward():
        a.accum_grad(out.grad.reshape(a.data.shape))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward():
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + size)
                p.accum_grad(out.grad[tuple(idx)].copy())
            offset += size

    out = Tensor._from_op(out_data, tuple(parts), backward)
    return out


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"rows: [{start}:{stop}] out of range for {a.data.shape}")
    out_data = a.data[start:stop]

    def backward():
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        a.accum_grad(g)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[1]):
        raise ShapeError(f"cols: [{start}:{stop}] out of range for {a.data.shape}")
    out_data = a.data[:, start:stop]

    def backward():
        g = np.zeros_like(a.data)
        g[:, start:stop] = out.grad
        a.accum_grad(g)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of `table` selected by integer `ids`."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D id list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"gather_rows: id out of range 0..{table.data.shape[0] - 1}")
    out_data = table.data[idx]

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        table.accum_grad(g)

    out = Tensor._from_op(out_data, (table,), backward)
    return out


def take1d(vec: Tensor, idx: np.ndarray) -> Tensor:
    """Index a 1-D tensor with an integer array of any shape."""
    vec = _as_tensor(vec)
    if vec.data.ndim != 1:
        raise ShapeError("take1d expects a 1-D table")
    idx = np.asarray(idx, dtype=np.int64)
    out_data = vec.data[idx]

    def backward():
        g = np.zeros_like(vec.data)
        np.add.at(g, idx, out.grad)
        vec.accum_grad(g)

    out = Tensor._from_op(out_data, (vec,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward():
        a.accum_grad(out.grad * (1.0 - out_data * out_data))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward():
        a.accum_grad(out.grad * out_data * (1.0 - out_data))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward():
        a.accum_grad(out.grad * (a.data > 0.0))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward():
        a.accum_grad(out.grad * out_data)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward():
        a.accum_grad(out.grad / a.data)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward():
        a.accum_grad(np.full_like(a.data, out.grad))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward():
        a.accum_grad(np.full_like(a.data, out.grad / n))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def pick_rows(mat: Tensor, idx) -> Tensor:
    """Select one column per row: out[i] = mat[i, idx[i]]."""
    mat = _as_tensor(mat)
    idx = np.asarray(idx, dtype=np.int64)
    if mat.data.ndim != 2 or idx.shape != (mat.data.shape[0],):
        raise ShapeError("pick_rows: idx must have one entry per row")
    r = np.arange(mat.data.shape[0])
    out_data = mat.data[r, idx].copy()

    def backward():
        g = np.zeros_like(mat.data)
        g[r, idx] = out.grad
        mat.accum_grad(g)

    out = Tensor._from_op(out_data, (mat,), backward)
    return out


def masked_softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out (False) positions get exactly
    zero weight. Accepts (n, m) or (H, n, m) logits with an (n, m) mask.

    Raises if any query row has no attendable position.
    """
    x = _as_tensor(x)
    if x.data.ndim not in (2, 3):
        raise ShapeError("masked_softmax_rows expects (n,m) or (H,n,m) logits")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} != logits shape {x.data.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("masked_softmax_rows: a query row has no attendable position")
        xm = np.where(mask, x.data, -np.inf)
    else:
        xm = x.data
    m = xm.max(axis=-1, keepdims=True)
    e = np.exp(xm - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * p).sum(axis=-1, keepdims=True)
        x.accum_grad(p * (g - dot))

    out = Tensor._from_op(p, (x,), backward)
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("log_softmax_rows expects a matrix")
    m = x.data.max(axis=1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_data = z - lse

    def backward():
        g = out.grad
        p = np.exp(out_data)
        x.accum_grad(g - p * g.sum(axis=1, keepdims=True))

    out = Tensor._from_op(out_data, (x,), backward)
    return out


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2 or gamma.data.shape != (x.data.shape[1],) or beta.data.shape != gamma.data.shape:
        raise ShapeError("layer_norm_rows: gamma/beta must match the feature dim")
    d = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma.accum_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accum_grad(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            t1 = dxhat.sum(axis=1, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=1, keepdims=True)
            x.accum_grad((dxhat - (t1 + xhat * t2) / d) * inv)

    out = Tensor._from_op(out_data, (x, gamma, beta), backward)
    return out


def dwconv1d_valid(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise temporal conv, valid mode: out[t, c] = sum_i w[i, c] * x[t+i, c].

    Input (T, C) with T >= k yields (T - k + 1, C). Callers prepend history
    or zero rows to realize causal padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"dwconv1d_valid: x {x.data.shape} vs w {w.data.shape}")
    k = w.data.shape[0]
    n = x.data.shape[0] - k + 1
    if n < 1:
        raise ShapeError(f"dwconv1d_valid: {x.data.shape[0]} rows < kernel {k}")
    out_data = np.zeros((n, x.data.shape[1]), dtype=x.data.dtype)
    for i in range(k):
        out_data += w.data[i] * x.data[i:i + n]

    def backward():
        g = out.grad
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                gw[i] = (g * x.data[i:i + n]).sum(axis=0)
            w.accum_grad(gw)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(k):
                gx[i:i + n] += w.data[i] * g
            x.accum_grad(gx)

    out = Tensor._from_op(out_data, (x, w), backward)
    return out


def channels_to_rows(x: Tensor) -> Tensor:
    """Rearrange a (C, T, F) block to (T, C*F) rows."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("channels_to_rows expects (C, T, F)")
    c, t, f = x.data.shape
    out_data = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, c * f)

    def backward():
        x.accum_grad(out.grad.reshape(t, c, f).transpose(1, 0, 2))

    out = Tensor._from_op(out_data, (x,), backward)
    return out


def conv2d_stride2(x: Tensor, w: Tensor, b: Tensor, pad_time_left: int = 2, pad_freq: int = 1) -> Tensor:
    """3x3 stride-2 convolution over a (C_in, T, F) block.

    Time axis is left-padded only (causal); frequency axis is padded on both
    sides. Output is (C_out, ceil(T/2), ceil(F/2)) for the default padding.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_stride2: x {x.data.shape}, w {w.data.shape}")
    cin, T, F = x.data.shape
    cout = w.data.shape[0]
    if w.data.shape[1] != cin or b.data.shape != (cout,):
        raise ShapeError("conv2d_stride2: channel mismatch")
    Tp, Fp = T + pad_time_left, F + 2 * pad_freq
    if Tp < 3 or Fp < 3:
        raise ShapeError("conv2d_stride2: input too short")
    xp = np.zeros((cin, Tp, Fp), dtype=x.data.dtype)
    xp[:, pad_time_left:, pad_freq:pad_freq + F] = x.data
    T2 = (Tp - 3) // 2 + 1
    F2 = (Fp - 3) // 2 + 1
    out_data = np.broadcast_to(b.data[:, None, None], (cout, T2, F2)).copy()
    patches = []
    for di in range(3):
        for dj in range(3):
            xs = xp[:, di:di + 2 * (T2 - 1) + 1:2, dj:dj + 2 * (F2 - 1) + 1:2]
            flat = np.ascontiguousarray(xs).reshape(cin, T2 * F2)
            patches.append(flat)
            out_data += (w.data[:, :, di, dj] @ flat).reshape(cout, T2, F2)

    def backward():
        g = out.grad
        g2 = g.reshape(cout, T2 * F2)
        if b.requires_grad:
            b.accum_grad(g.sum(axis=(1, 2)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i, (di, dj) in enumerate((a, c) for a in range(3) for c in range(3)):
                gw[:, :, di, dj] = g2 @ patches[i].T
            w.accum_grad(gw)
        if x.requires_grad:
            gxp = np.zeros((cin, Tp, Fp), dtype=x.data.dtype)
            for i, (di, dj) in enumerate((a, c) for a in range(3) for c in range(3)):
                gxp[:, di:di + 2 * (T2 - 1) + 1:2, dj:dj + 2 * (F2 - 1) + 1:2] += (
                    w.data[:, :, di, dj].T @ g2
                ).reshape(cin, T2, F2)
            x.accum_grad(gxp[:, pad_time_left:, pad_freq:pad_freq + F])

    out = Tensor._from_op(out_data, (x, w, b), backward)
    return out


def scalar_affine(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of scalar tensors: sum_i c_i * t_i."""
    acc = None
    for c, t in terms:
        piece = mul(t, float(c))
        acc = piece if acc is None else add(acc, piece)
    if acc is None:
        raise ValueError("scalar_affine: no terms")
    return acc
