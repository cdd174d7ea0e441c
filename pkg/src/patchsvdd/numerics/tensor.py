"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations the patch encoders and the position
classifier need are provided. Every op records a closure mapping the
upstream gradient to gradients for its parents; ``Tensor.backward`` walks
the graph in reverse topological order and accumulates into leaves.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- graph --------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None if not isinstance(self, Parameter) else np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g.astype(node.data.dtype, copy=False)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf; ``gradient`` starts at zero and accumulates."""

    __slots__ = ()

    def __init__(self, data: ArrayLike, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.data.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum())))
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if b.data.ndim == 0:
        return _result(a.data - b.data, (a, b), lambda g: (g, np.asarray(-g.sum())))
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Product with a python scalar or a same-shape tensor."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * a.data.dtype.type(s),))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)
    shape = x.shape

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def tensor_mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.asarray(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, backward)


def l2_norm(x: Tensor, eps: float = 0.0) -> Tensor:
    """sqrt(sum(x**2, axis=-1) + eps), reducing the last axis."""
    sq = np.einsum("...i,...i->...", x.data, x.data)
    y = np.sqrt(sq + x.data.dtype.type(eps))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(y > 0, g / y, 0.0).astype(x.dtype, copy=False)
        return (x.data * scale[..., None],)

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    """max(x, alpha*x); the subgradient at exactly zero is ``alpha``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    a = x.data.dtype.type(alpha)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * a)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * a),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x of shape [n] or [B, n]."""
    n, m = weight.shape
    if x.shape[-1] != n or bias.shape != (m,) or x.ndim not in (1, 2):
        raise DimensionError(
            f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape} do not conform"
        )
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g @ weight.data.T
        if x.ndim == 1:
            gw = np.outer(x.data, g)
            gb = g
        else:
            gw = x.data.T @ g
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # x: [N, H, W, C] -> [N, Ho, Wo, kh, kw, C] (view where possible)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [N, Ho, Wo, C, kh, kw]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution in HWC layout.

    ``x`` is [H, W, Cin] or batched [N, H, W, Cin]; ``kernel`` is
    [kh, kw, Cin, Cout]. Output extents are floor((H - kh) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be rank 3 or 4, got shape {x.shape}")
    xd = x.data[None] if single else x.data
    n, h, w, c = xd.shape
    bad = []
    if c != cin:
        bad.append(f"channels {c} != kernel Cin {cin}")
    if kh > h:
        bad.append(f"kernel height {kh} > input height {h}")
    if kw > w:
        bad.append(f"kernel width {kw} > input width {w}")
    if bias.shape != (cout,):
        bad.append(f"bias {bias.shape} != ({cout},)")
    if bad:
        raise DimensionError("conv2d: " + "; ".join(bad))

    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = _im2col(xd, kh, kw, stride).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, cout)
    if single:
        out = out[0]

    def backward(g):
        g2 = (g[None] if single else g).reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            gx = np.zeros_like(xd)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, i, j, :]
            if single:
                gx = gx[0]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), backward)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; batched inputs return the batch mean."""
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    k = z.shape[1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (z.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be {z.shape[0]} integers, got {label!r}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {label!r}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = logsum - shifted[rows, labels]
    out = np.asarray(losses.mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _result(out, (logits,), backward)
