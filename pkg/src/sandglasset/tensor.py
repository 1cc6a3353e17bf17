"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a row-major (C-order) numpy array in single or double
precision.  Every operation eagerly computes its value and, when gradients
are enabled, records a backward closure; ``Tensor.backward`` replays the
closures in reverse topological order.  There is no graph compiler and no
fusion beyond a handful of hand-written composite kernels (LSTM, layer
norm, softmax) that carry their own backward rules.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording of backward closures inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff -----------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        Without an explicit ``seed`` the tensor must hold a single element
        (a scalar loss); the seed then defaults to one.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            seed = seed.reshape(self.data.shape)

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        _accumulate(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; multiply by a scalar")
        return mul_scalar(self, 1.0 / float(other))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False):
    """Add ``g`` into ``t.grad``.

    ``owned=True`` promises that ``g`` is a freshly allocated array that no
    other closure aliases, letting the first accumulation steal it instead
    of copying.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        axis = next(
            (i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y),
            min(a.ndim, b.ndim),
        )
        raise ShapeError(
            f"{op}: operand shapes {a.shape} and {b.shape} differ first at axis {axis}"
        )
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data, owned=True)
        _accumulate(b, g * a.data, owned=True)

    return _result(a.data * b.data, (a, b), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _accumulate(a, g)

    return _result(a.data + a.data.dtype.type(s), (a,), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def backward(g):
        _accumulate(a, g * s)

    return _result(a.data * s, (a,), backward)


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-learnable array, broadcast into ``a``'s shape."""
    const = np.asarray(const, dtype=a.data.dtype)
    if np.broadcast_shapes(a.shape, const.shape) != a.shape:
        raise ShapeError(
            f"add_const: constant of shape {const.shape} does not broadcast into {a.shape}"
        )

    def backward(g):
        _accumulate(a, g)

    return _result(a.data + const, (a,), backward)


def _vec_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def add_vec(x: Tensor, v: Tensor, axis: int = 0) -> Tensor:
    """Add a vector along one axis of ``x`` (bias broadcast)."""
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(
            f"add_vec: vector {v.shape} does not match axis {axis} of {x.shape}"
        )
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        _accumulate(x, g)
        _accumulate(v, g.sum(axis=reduce_axes))

    return _result(x.data + _vec_view(v.data, x.ndim, axis), (x, v), backward)


def scale_vec(x: Tensor, v: Tensor, axis: int = 0) -> Tensor:
    """Multiply ``x`` by a vector broadcast along one axis."""
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(
            f"scale_vec: vector {v.shape} does not match axis {axis} of {x.shape}"
        )
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    vb = _vec_view(v.data, x.ndim, axis)

    def backward(g):
        _accumulate(x, g * vb)
        _accumulate(v, (g * x.data).sum(axis=reduce_axes))

    return _result(x.data * vb, (x, v), backward)


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0), (x,), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a single learnable slope."""
    if slope.size != 1:
        raise ShapeError(f"prelu: slope must be a single value, got shape {slope.shape}")
    pos = x.data > 0
    a = slope.data.reshape(())

    def backward(g):
        _accumulate(x, g * np.where(pos, 1.0, a))
        _accumulate(slope, np.sum(g * np.where(pos, 0.0, x.data)).reshape(slope.shape))

    return _result(np.where(pos, x.data, a * x.data), (x, slope), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out.astype(x.data.dtype, copy=False), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - dot), owned=True)

    return _result(out, (x,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.data.sum(dtype=x.data.dtype).reshape(()), (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    return mul_scalar(tsum(x), 1.0 / n)


# -- shape ops -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(np.ascontiguousarray(x.data.reshape(shape)), (x,), backward)


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    def backward(g):
        _accumulate(x, np.moveaxis(g, dst, src))

    return _result(np.ascontiguousarray(np.moveaxis(x.data, src, dst)), (x,), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _result(np.ascontiguousarray(x.data[index]), (x,), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        _check_binary(first, t, "stack")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _result(data, tuple(tensors), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(data, tuple(tensors), backward)


def take_per_column(x: Tensor, idx) -> Tensor:
    """Pick one row per column of a 2-D tensor: out[b] = x[idx[b], b]."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[1],):
        raise ShapeError(
            f"take_per_column: need x [P, B] and idx [B], got {x.shape} and {idx.shape}"
        )
    cols = np.arange(x.shape[1])

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx, cols] = g
        _accumulate(x, full)

    return _result(np.ascontiguousarray(x.data[idx, cols]), (x,), backward)


# -- contractions ---------------------------------------------------------------


def matmul(w: Tensor, x: Tensor) -> Tensor:
    """Contract a 2-D weight [O, I] with the leading axis of ``x`` [I, ...]."""
    if w.ndim != 2:
        raise ShapeError(f"matmul: weight must be 2-D, got shape {w.shape}")
    if x.ndim < 1 or x.shape[0] != w.shape[1]:
        raise ShapeError(
            f"matmul: weight columns {w.shape[1]} do not match input axis 0 of {x.shape}"
        )
    if w.data.dtype != x.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {w.data.dtype} vs {x.data.dtype}")
    rest = tuple(range(1, x.ndim))

    def backward(g):
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, x.data, axes=(rest, rest)), owned=True)
        if x.requires_grad:
            _accumulate(x, np.tensordot(w.data, g, axes=([0], [0])), owned=True)

    return _result(np.tensordot(w.data, x.data, axes=([1], [0])), (w, x), backward)


def inner_contract(a: Tensor, b: Tensor) -> Tensor:
    """out[s, z, ...] = sum_f a[f, s, ...] * b[f, z, ...] (shared batch axes)."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"inner_contract: incompatible shapes {a.shape} and {b.shape}")
    data = np.einsum("fs...,fz...->sz...", a.data, b.data, optimize=True)

    def backward(g):
        _accumulate(a, np.einsum("sz...,fz...->fs...", g, b.data, optimize=True))
        _accumulate(b, np.einsum("sz...,fs...->fz...", g, a.data, optimize=True))

    return _result(data, (a, b), backward)


def apply_weights(w: Tensor, v: Tensor) -> Tensor:
    """out[f, s, ...] = sum_z w[s, z, ...] * v[f, z, ...] (shared batch axes)."""
    if w.shape[1] != v.shape[1] or w.shape[2:] != v.shape[2:]:
        raise ShapeError(f"apply_weights: incompatible shapes {w.shape} and {v.shape}")
    data = np.einsum("sz...,fz...->fs...", w.data, v.data, optimize=True)

    def backward(g):
        _accumulate(w, np.einsum("fs...,fz...->sz...", g, v.data, optimize=True))
        _accumulate(v, np.einsum("sz...,fs...->fz...", w.data, g, optimize=True))

    return _result(data, (w, v), backward)


# -- random streams --------------------------------------------------------------


_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, tag: int) -> int:
    """Derive an independent 64-bit stream key (splitmix64 style)."""
    z = (seed + tag * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngState:
    """Counter-based random stream: (seed, counter) fully determine draws.

    Every draw keys a fresh Philox generator with (seed, counter) and then
    advances the counter, so streams are reproducible across runs and
    platforms and never overlap.
    """

    seed: int
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        gen = np.random.Generator(
            np.random.Philox(key=[self.seed & _MASK64, self.counter & _MASK64])
        )
        self.counter += 1
        return gen

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, size=shape)

    def random(self, shape=()) -> np.ndarray:
        return self._generator().random(size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def split(self, tag: int) -> "RngState":
        """Independent child stream; does not advance this stream."""
        return RngState(derive_seed(self.seed, tag), 0)
