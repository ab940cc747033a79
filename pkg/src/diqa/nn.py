"""Minimal tensor type with reverse-mode gradients.

Only the operations the quality networks need are provided: 3x3 same-size
convolution, 2x2 max pooling, ReLU, fully-connected layers, classic dropout,
plus the elementwise/reduction ops used by feature fusion and patch pooling.

Every op accepts either a single sample or a leading batch axis.  Values keep
the dtype they were created with, so gradient checks can run the exact same
graph in double precision.
"""
from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit an operation."""


class GraphError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


# Branch choices of the piecewise ops (relu, max pooling, abs); see activation_pattern().
_pattern: list | None = None
_replay = None


@contextmanager
def activation_pattern(replay: Sequence[np.ndarray] | None = None):
    """Record, or with ``replay`` reuse, the relu masks, pooling argmaxes and abs signs.

    Recording yields the list of choices made by every piecewise op run inside
    the block.  Replaying forces those choices instead of computing them, so the
    forward pass stays on one smooth piece of the network; finite differences
    taken that way are free of kink crossings.
    """
    global _pattern, _replay
    saved = _pattern, _replay
    _pattern, _replay = [], (iter(replay) if replay is not None else None)
    try:
        yield _pattern
    finally:
        _pattern, _replay = saved


def _choose(choice: np.ndarray) -> np.ndarray:
    if _replay is not None:
        forced = next(_replay)
        if forced.shape != choice.shape:
            raise GraphError("replayed activation pattern does not match the graph")
        choice = forced
    if _pattern is not None:
        _pattern.append(choice)
    return choice


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data, dtype=data.dtype)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._backward is None:
            raise GraphError("backward called on a tensor with no recorded forward graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise & reductions ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    # subgradient of |.| at 0 is taken as 0
    sign = _choose(np.sign(x.data))
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``."""
    x = as_tensor(x)
    mask = _choose(x.data > 0)
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- layers ---------------------------------------------------------------------

def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                           lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def _check_conv(c_in: int, weight: Tensor, bias: Tensor) -> int:
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 weight must be [C_out,C_in,3,3], got {weight.shape}")
    if weight.shape[1] != c_in:
        raise DimensionError(f"channel axis mismatch: input has {c_in}, weight expects {weight.shape[1]}")
    c_out = weight.shape[0]
    if bias.shape != (c_out,):
        raise DimensionError(f"bias axis mismatch: expected ({c_out},), got {bias.shape}")
    return c_out


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1 (spatial size preserved).

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``weight`` is
    ``[C_out, C_in, 3, 3]``; ``bias`` is ``[C_out]``.
    """
    x = as_tensor(x)
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv3x3 input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    _check_conv(x.shape[1], weight, bias)
    out = transpose(conv3x3_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias), (0, 3, 1, 2))
    return reshape(out, out.shape[1:]) if single else out


def conv3x3_nhwc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channels-last variant of :func:`conv3x3`: ``[N, H, W, C_in] -> [N, H, W, C_out]``.

    Large feature maps use nine shifted GEMMs over the flattened padded grid
    (no patch matrix is materialised); small maps use a patch matrix.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv3x3_nhwc input must be [N,H,W,C], got {x.shape}")
    n, h, w, c_in = x.shape
    c_out = _check_conv(c_in, weight, bias)
    if h >= 16 and c_in >= 16:
        return _conv_shifted(x, weight, bias, n, h, w, c_in, c_out)
    return _conv_patches(x, weight, bias, n, h, w, c_in, c_out)


def _conv_patches(x, weight, bias, n, h, w, c_in, c_out):
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # columns ordered (ky, kx, c_in)
    cols = np.concatenate([padded[:, ky:ky + h, kx:kx + w, :] for ky in range(3) for kx in range(3)], axis=-1)
    cols = cols.reshape(n * h * w, 9 * c_in)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(c_out, 9 * c_in)
    out = cols @ wmat.T
    out += bias.data

    def backward(g):
        gm = g.reshape(n * h * w, c_out)
        gw = (gm.T @ cols).reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, h, w, 9, c_in)
            gpad = np.zeros_like(padded)
            for k in range(9):
                ky, kx = divmod(k, 3)
                gpad[:, ky:ky + h, kx:kx + w, :] += gcols[:, :, :, k, :]
            gx = gpad[:, 1:-1, 1:-1, :]
        return gx, np.ascontiguousarray(gw), gm.sum(axis=0)

    return Tensor._from_op(out.reshape(n, h, w, c_out), (x, weight, bias), backward)


def _conv_shifted(x, weight, bias, n, h, w, c_in, c_out):
    hp, wp = h + 2, w + 2
    padded = np.zeros((n, hp, wp, c_in), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x.data
    flat = padded.reshape(n * hp * wp, c_in)
    # output pixel (i, j) lives at grid index i*wp + j; tap (ky, kx) reads index + ky*wp + kx
    span = flat.shape[0] - (2 * wp + 2)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # [3, 3, C_in, C_out]
    grid = np.zeros((n * hp * wp, c_out), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            off = ky * wp + kx
            grid[:span] += flat[off:off + span] @ taps[ky, kx]
    out = grid.reshape(n, hp, wp, c_out)[:, :h, :w, :] + bias.data

    def backward(g):
        gfull = np.zeros((n, hp, wp, c_out), dtype=g.dtype)
        gfull[:, :h, :w, :] = g
        gflat = gfull.reshape(-1, c_out)[:span]
        gtaps = np.empty_like(taps)
        gpad = np.zeros_like(flat) if x.requires_grad else None
        for ky in range(3):
            for kx in range(3):
                off = ky * wp + kx
                gtaps[ky, kx] = flat[off:off + span].T @ gflat
                if gpad is not None:
                    gpad[off:off + span] += gflat @ taps[ky, kx].T
        gx = None if gpad is None else gpad.reshape(n, hp, wp, c_in)[:, 1:-1, 1:-1, :]
        return gx, np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1)), g.sum(axis=(0, 1, 2))

    return Tensor._from_op(np.ascontiguousarray(out), (x, weight, bias), backward)


def maxpool_indices(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint 2x2 max over the last two axes; returns (max, argmax in 0..3, row-major in the window)."""
    h, w = data.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got H={h}, W={w}")
    blocks = _windows(data)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def _windows(data: np.ndarray) -> np.ndarray:
    """``[..., H, W]`` -> ``[..., H/2, W/2, 4]`` disjoint 2x2 windows, row-major inside each."""
    h, w = data.shape[-2:]
    lead = data.shape[:-2]
    blocks = data.reshape(lead + (h // 2, 2, w // 2, 2))
    return np.moveaxis(blocks, -3, -2).reshape(lead + (h // 2, w // 2, 4))


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes; gradient routed to the argmax only."""
    x = as_tensor(x)
    out, idx = maxpool_indices(x.data)
    if _pattern is not None or _replay is not None:
        idx = _choose(idx)
        out = np.take_along_axis(_windows(x.data), idx[..., None], axis=-1)[..., 0]
    h, w = x.shape[-2:]
    lead = x.shape[:-2]

    def backward(g):
        blocks = np.zeros(lead + (h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(lead + (h // 2, w // 2, 2, 2))
        return (np.moveaxis(blocks, -2, -3).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)


def maxpool2x2_nhwc(x: Tensor) -> Tensor:
    """2x2 max pooling over axes 1 and 2 of ``[N, H, W, C]``."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial extents, got H={h}, W={w}")
    corners = np.stack([x.data[:, dy::2, dx::2, :] for dy in (0, 1) for dx in (0, 1)])
    idx = _choose(corners.argmax(axis=0))
    out = np.take_along_axis(corners, idx[None], axis=0)[0]

    def backward(g):
        routed = np.zeros_like(corners)
        np.put_along_axis(routed, idx[None], g[None], axis=0)
        gx = np.empty(x.shape, dtype=g.dtype)
        for k in range(4):
            dy, dx = divmod(k, 2)
            gx[:, dy::2, dx::2, :] = routed[k]
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully-connected layer ``weight @ x + bias`` for ``[D_in]`` or ``[N, D_in]`` input."""
    x = as_tensor(x)
    if weight.data.ndim != 2 or bias.shape != (weight.shape[0],):
        raise DimensionError(f"fc parameters malformed: weight {weight.shape}, bias {bias.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"fc input axis mismatch: got {x.shape[-1]}, expected {weight.shape[1]}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        return (g @ weight.data, g2.T @ x2, g2.sum(axis=0))

    return Tensor._from_op(out, (x, weight, bias), backward)


def dropout(x: Tensor, keep: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Classic dropout: drop at train time without rescaling, scale by ``keep`` at eval."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must lie in (0, 1], got {keep}")
    x = as_tensor(x)
    if not train:
        return mul(x, keep)
    if keep == 1.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit random generator")
    mask = (rng.random(x.shape) < keep).astype(x.dtype)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


# -- parameters -----------------------------------------------------------------

class ParamSet(OrderedDict):
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __setitem__(self, key, value):
        if not isinstance(value, Tensor):
            raise TypeError(f"parameter {key!r} must be a Tensor")
        value.name = key
        super().__setitem__(key, value)

    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out[name] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}


def he_normal(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, step: float = 1e-3) -> float:
    """Central finite difference of ``f`` w.r.t. ``arr[index]`` (arr modified in place, then restored)."""
    orig = arr[index]
    arr[index] = orig + step
    fp = f()
    arr[index] = orig - step
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2 * step)


def same_pattern(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def iter_indices(arr: np.ndarray, count: int, rng: np.random.Generator) -> Iterable[tuple[int, ...]]:
    """Up to ``count`` distinct random multi-indices into ``arr``."""
    flat = rng.choice(arr.size, size=min(count, arr.size), replace=False)
    for f in flat:
        yield np.unravel_index(int(f), arr.shape)
