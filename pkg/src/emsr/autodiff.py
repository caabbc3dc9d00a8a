"""Dense float64 tensors with reverse-mode differentiation.

Every op records its inputs and a backward rule on the output tensor, so the
computation graph is implicit in the tensors themselves.  :class:`Tape`
linearizes that graph (topological order) from a scalar loss and runs the
backward rules once.  Parameters are tensors created with
``requires_grad=True``; only they receive ``.grad`` buffers.

Gradients accumulate across repeated :func:`backward` calls until
:func:`zero_grad` is called.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "abs_",
    "square",
    "sum_",
    "mean",
    "matmul",
    "linear",
    "softmax_rows",
    "layer_norm",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "reshape",
    "permute",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A real array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op: str | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._parents = parents
        out._backward = backward
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def on_tape(self) -> bool:
        return self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}{op})"

    def __add__(self, other):
        return add_scalar(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_scalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer))


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


class Tape:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        if not output.on_tape:
            raise ValueError(
                f"{output!r} was not produced by a recorded op; nothing to differentiate"
            )
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad]

    def backward(self) -> dict[str, np.ndarray]:
        out = self.output
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {out.shape}")

        # only walk nodes that can reach a parameter
        reaches: set[int] = set()
        for node in self.nodes:
            if node.requires_grad or any(id(p) in reaches for p in node._parents):
                reaches.add(id(node))

        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or id(node) not in reaches:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or id(p) not in reaches:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

        result: dict[str, np.ndarray] = {}
        for p in self.parameters():
            result[p.name or f"param{id(p)}"] = p.grad
        return result


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every parameter feeding ``loss``; return them by name."""
    return Tape(loss).backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- pointwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible instead of silently zeroing it
    return Tensor._from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    s = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


def square(x: Tensor) -> Tensor:
    v = x.data
    return Tensor._from_op(v * v, (x,), lambda g: (2.0 * g * v,), "square")


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(
        np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return Tensor._from_op(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes; leading axes must match exactly."""
    if a.data.ndim < 2 or b.data.ndim != a.data.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` for 2-D ``x`` of shape (T, in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape[1]} outputs")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def back(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, back, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    v = x.data
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` over its last axis, then apply gain/offset."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for width {c}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, H', W', kh, kw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 zero-padded 2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``weight`` (Cout, Cin, kh, kw) with odd kernel
    extents.  ``padding`` defaults to ``(kh - 1) // 2`` which preserves the
    spatial size.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {x.shape[1]} channels but weight {weight.shape} expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    if padding is None:
        padding = (kh - 1) // 2
    if kh != kw or padding != (kh - 1) // 2:
        raise ShapeError("conv2d: only square kernels with size-preserving padding are supported")

    wd = weight.data
    cols = _im2col(x.data, kh, kw, padding)
    out = np.einsum("nchwij,ocij->nohw", cols, wd, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        # full correlation with the spatially flipped kernel, channels swapped
        gcols = _im2col(g, kh, kw, padding)
        gx = np.einsum("nohwij,ocij->nchw", gcols, wd[:, :, ::-1, ::-1], optimize=True)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back, "conv2d")


# ---------------------------------------------------------------- rearrangement


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute"
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat"
    )


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, r*H, r*W); channel c*r*r + i*r + j lands at (i, j)."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def back(g):
        return (_unshuffle(g, r),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back, "pixel_shuffle")


def _unshuffle(v: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = v.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        v.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    )


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    out = _unshuffle(x.data, r)
    n, c, hr, wr = x.shape
    h, w = hr // r, wr // r

    def back(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return Tensor._from_op(out, (x,), back, "pixel_unshuffle")
