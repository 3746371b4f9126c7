"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation that touches a tensor requiring gradients appends a node to
the thread's active :class:`Tape`. :func:`backward` replays the tape in
reverse, consumes it, and installs a fresh one, so each forward pass builds
its own graph.

Only scalar broadcasting is supported. Operations that combine a batch of
activations with a weight (``linear``, ``mix``, ``add_bias``, ``bmm``) are
separate primitives with their own backward rules instead of relying on
implicit broadcasting.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from numbers import Number
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError", "active_tape", "no_grad",
    "backward", "gradcheck", "dump_tensor", "load_tensor",
    "add", "sub", "mul", "neg", "matmul", "linear", "mix", "bmm", "add_bias",
    "gelu", "relu", "sigmoid", "tanh", "exp", "log", "elementwise",
    "tsum", "mean", "reshape", "transpose", "getitem", "concat", "stack",
    "log_softmax", "softmax", "pick", "lstm_cell", "layer_norm", "conv2d", "conv1d_temporal",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of the autodiff tape (consumed tape, non-scalar loss, ...)."""


class _SliceGrad:
    """Gradient confined to ``input[index]``; avoids materialising zeros."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "tape")

    def __init__(self, inputs, output, backward_fn, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Append-only record of operations in recording (topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, inputs, output, backward_fn) -> Node:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        node = Node(inputs, output, backward_fn, self)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def new_tape() -> Tape:
    """Discard the current tape (e.g. after an aborted pass) and start a new one."""
    _local.tape = Tape()
    return _local.tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self._grad = None
        self._owned = False
        self.requires_grad = bool(requires_grad)
        self.tape_node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t._grad = None
        t._owned = False
        t.requires_grad = False
        t.tape_node = None
        return t

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
            self._owned = True
        elif not self._owned:
            self._grad = np.array(self._grad, copy=True)
            self._owned = True
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"grad shape {value.shape} != tensor shape {self.data.shape}")
        self._grad = value.copy()
        self._owned = True

    def zero_grad(self) -> None:
        self._grad = None

    # Incoming gradient arrays may be shared with other tensors, so the first
    # contribution is stored borrowed and only copied before an in-place add.
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = np.reshape(g, self.data.shape)
        if self._grad is None:
            self._grad = g
            self._owned = False
        elif self._owned:
            self._grad += g
        else:
            self._grad = self._grad + g
            self._owned = True

    def _accumulate_slice(self, index, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
            self._owned = True
        elif not self._owned:
            self._grad = np.array(self._grad, copy=True)
            self._owned = True
        self._grad[index] += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Number):
            raise ShapeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        tape = active_tape()
        for t in inputs:
            if t.tape_node is not None and t.tape_node.tape.consumed:
                raise TapeError("operand was produced on a consumed tape; recompute the forward pass")
        out.requires_grad = True
        out.tape_node = tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        if loss.requires_grad:
            loss._accumulate(np.ones_like(loss.data))
            return
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape = node.tape
    if tape.consumed:
        raise TapeError("backward called on a consumed tape")
    if tape is not active_tape():
        raise TapeError("loss is not on the active tape")

    loss._accumulate(np.ones_like(loss.data))
    for nd in reversed(tape.nodes):
        g = nd.output._grad
        if g is None:
            nd.inputs = nd.output = nd.backward_fn = None
            continue
        grads = nd.backward_fn(g)
        for inp, gi in zip(nd.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(gi, _SliceGrad):
                inp._accumulate_slice(gi.index, gi.value)
            else:
                inp._accumulate(gi)
        # intermediate grads are dead once propagated; unlinking the node
        # breaks the tensor<->node cycle so activations are freed at once
        nd.output._grad = None
        nd.inputs = nd.output = nd.backward_fn = None
    tape.consumed = True
    tape.nodes = []
    new_tape()


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.ndim == 0


def add(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,))
    if isinstance(a, Number):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if _is_scalar_tensor(b):
        return _make(a.data + b.data, (a, b), lambda g: (g, np.sum(g)))
    if _is_scalar_tensor(a):
        return _make(a.data + b.data, (a, b), lambda g: (np.sum(g), g))
    _check_same(a, b, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if isinstance(b, Number):
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    if isinstance(b, Number):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, Number):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _is_scalar_tensor(b):
        return _make(ad * bd, (a, b), lambda g: (g * bd, np.sum(g * ad)))
    if _is_scalar_tensor(a):
        return _make(ad * bd, (a, b), lambda g: (np.sum(g * bd), g * ad))
    _check_same(a, b, "mul")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


_ELEMENTWISE = {
    "gelu": gelu, "relu": relu, "sigmoid": sigmoid, "tanh": tanh,
    "add": add, "mul": mul,
}


def elementwise(op_kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``x[..., k]`` with ``w[k, n]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {list(x.shape)} and {list(w.shape)}")
    xd, wd = x.data, w.data
    k, n = wd.shape

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g.reshape(-1, n) if w.requires_grad else None
        return gx, gw

    return _make(xd @ wd, (x, w), bw)


def mix(A: Tensor, x: Tensor) -> Tensor:
    """Left-multiply ``A[V, V]`` onto the node axis of ``x[..., V, C]``."""
    if A.ndim != 2 or x.ndim < 2 or A.shape[1] != x.shape[-2]:
        raise ShapeError(f"mix: incompatible shapes {list(A.shape)} and {list(x.shape)}")
    Ad, xd = A.data, x.data

    def bw(g):
        gA = None
        if A.requires_grad:
            V, C = xd.shape[-2:]
            gA = np.einsum("buc,bvc->uv", g.reshape(-1, A.shape[0], C), xd.reshape(-1, V, C))
        gx = Ad.T @ g if x.requires_grad else None
        return gA, gx

    return _make(Ad @ xd, (A, x), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``a[..., m, k] @ b[..., k, n]`` with identical leading axes."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {list(x.shape)} and {list(b.shape)}")
    n = b.shape[0]
    return _make(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))


def lstm_cell(z: Tensor, c: Tensor | None = None) -> Tensor:
    """Fused LSTM pointwise update.

    ``z[..., 4H]`` holds gate pre-activations in the order input, forget,
    output, candidate; ``c[..., H]`` is the previous cell (zero when None).
    Returns ``concat([h_new, c_new], -1)``.
    """
    H4 = z.shape[-1]
    if H4 % 4:
        raise ShapeError(f"lstm_cell: gate axis {H4} is not a multiple of 4")
    H = H4 // 4
    if c is not None and c.shape != z.shape[:-1] + (H,):
        raise ShapeError(f"lstm_cell: cell shape {list(c.shape)} does not match gates {list(z.shape)}")
    zd = z.data
    sg = expit(zd[..., :3 * H])
    i, f, o = sg[..., :H], sg[..., H:2 * H], sg[..., 2 * H:]
    cand = np.tanh(zd[..., 3 * H:])
    cd = None if c is None else c.data
    c_new = i * cand if cd is None else f * cd + i * cand
    tc = np.tanh(c_new)
    h = o * tc

    def bw(g):
        gh, gc = g[..., :H], g[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.empty_like(zd)
        dz[..., :H] = dc * cand * i * (1.0 - i)
        dz[..., H:2 * H] = 0.0 if cd is None else dc * cd * f * (1.0 - f)
        dz[..., 2 * H:3 * H] = gh * tc * o * (1.0 - o)
        dz[..., 3 * H:] = dc * i * (1.0 - cand * cand)
        return (dz,) if cd is None else (dz, dc * f)

    inputs = (z,) if c is None else (z, c)
    return _make(np.concatenate([h, c_new], axis=-1), inputs, bw)


# ---------------------------------------------------------------- structure

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, shape),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _check_basic_index(index) -> None:
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (it is Ellipsis or isinstance(it, (slice, int, np.integer))):
            raise TypeError("only basic indexing (ints, slices, Ellipsis) is supported")


def getitem(x: Tensor, index) -> Tensor:
    _check_basic_index(index)
    return _make(np.array(x.data[index]), (x,), lambda g: (_SliceGrad(index, g),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if other != ref:
            raise ShapeError(f"concat: shape mismatch {list(tensors[0].shape)} vs {list(t.shape)}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    axis = axis % (tensors[0].ndim + 1)
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- softmax family

def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, stabilised by max subtraction."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * np.sum(g, axis=-1, keepdims=True),))


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),))


def pick(x: Tensor, index) -> Tensor:
    """``out[b] = x[b, index[b]]`` for a 2-D ``x``."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: expected x[B, C] and index[B], got {list(x.shape)} and {list(idx.shape)}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise IndexError("pick: index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(x.data[rows, idx], (x,), bw)


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape [{C}]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, C).sum(axis=0)
        gb = g.reshape(-1, C).sum(axis=0)
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolutions

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on ``[C, H, W]`` or ``[N, C, H, W]`` input."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected input [N,]C,H,W and kernel O,C/g,kh,kw; got "
                         f"{list(x.shape)} and {list(kernel.shape)}")
    xd = x.data if batched else x.data[None]
    N, C, H, W = xd.shape
    O, Cg, kh, kw = kernel.shape
    if C % groups or O % groups or C // groups != Cg:
        raise ShapeError(f"conv2d: {C} input channels, kernel {list(kernel.shape)}, groups={groups}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias must have shape [{O}]")
    s = stride
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    xg = xp.reshape(N, groups, Cg, Hp, Wp)
    wg = kernel.data.reshape(groups, O // groups, Cg, kh, kw)
    out = np.zeros((N, groups, O // groups, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
            out += np.einsum("ngchw,goc->ngohw", patch, wg[:, :, :, i, j], optimize=True)
    out = out.reshape(N, O, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gb = g if batched else g[None]
        gg = gb.reshape(N, groups, O // groups, Ho, Wo)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xg)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += np.einsum(
                        "ngohw,goc->ngchw", gg, wg[:, :, :, i, j], optimize=True)
            gxp = gxp.reshape(N, C, Hp, Wp)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            if not batched:
                gx = gx[0]
        if kernel.requires_grad:
            gwg = np.zeros_like(wg)
            for i in range(kh):
                for j in range(kw):
                    patch = xg[:, :, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
                    gwg[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, patch, optimize=True)
            gw = gwg.reshape(kernel.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (gb.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, inputs, bw)


def conv1d_temporal(x: Tensor, kernel: Tensor, bias: Tensor | None = None, pad: int = 0,
                    axis: int = -2) -> Tensor:
    """Convolve ``x`` along its time ``axis`` with ``kernel[C_out, C_in, k]``.

    Channels are the last axis of ``x``; every other axis is an independent
    batch axis. The default layout is ``[..., T, C_in]``.
    """
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"conv1d_temporal: incompatible shapes {list(x.shape)} and {list(kernel.shape)}")
    ax = axis % x.ndim
    if ax == x.ndim - 1:
        raise ShapeError("conv1d_temporal: time axis cannot be the channel axis")
    Cout, Cin, k = kernel.shape
    steps = x.shape[ax]
    if steps + 2 * pad < k:
        raise ShapeError(f"conv1d_temporal: kernel length {k} exceeds padded length {steps + 2 * pad}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv1d_temporal: bias must have shape [{Cout}]")
    To = steps + 2 * pad - k + 1
    xp = x.data
    if pad:
        widths = [(0, 0)] * x.ndim
        widths[ax] = (pad, pad)
        xp = np.pad(xp, widths)
    # window view: x.shape with T -> To and a trailing k axis after C_in
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=ax)
    out_shape = cols.shape[:-2] + (Cout,)
    cols2 = cols.reshape(-1, Cin * k)
    wmat = kernel.data.reshape(Cout, Cin * k)
    out = (cols2 @ wmat.T).reshape(out_shape)
    if bias is not None:
        out += bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, Cout)
        gx = gw = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(cols.shape)
            gxp = np.zeros(xp.shape)
            for j in range(k):
                sl = (slice(None),) * ax + (slice(j, j + To),)
                gxp[sl] += dcols[..., j]
            if pad:
                gx = gxp[(slice(None),) * ax + (slice(pad, pad + steps),)]
            else:
                gx = gxp
        if kernel.requires_grad:
            gw = (g2.T @ cols2).reshape(kernel.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return _make(out, inputs, bw)


# ---------------------------------------------------------------- utilities

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``, elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], *, eps: float = 1e-5,
              samples: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6, stencil: int = 3) -> float:
    """Max relative error between autodiff and central finite differences.

    ``fn(*inputs)`` may return any shape; it is reduced to a scalar through a
    fixed random projection so that every output element participates. With
    ``samples`` set, only that many randomly chosen input entries are probed.
    ``stencil=5`` uses the fourth-order central formula, for functions whose
    third derivative is large enough to swamp the three-point estimate.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    new_tape()
    out = fn(*inputs)
    proj = rng.uniform(-1.0, 1.0, size=out.shape)
    backward(tsum(mul(out, Tensor._wrap(proj))))

    def f() -> float:
        with no_grad():
            return float(np.sum(fn(*inputs).data * proj))

    coords = [(ti, idx) for ti, t in enumerate(inputs) for idx in np.ndindex(t.shape)]
    if samples is not None and samples < len(coords):
        pick_ = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(pick_)]
    worst = 0.0
    for ti, idx in coords:
        t = inputs[ti]
        orig = t.data[idx]

        def at(offset):
            t.data[idx] = orig + offset
            return f()

        num = (at(eps) - at(-eps)) / (2 * eps)
        if stencil == 5:
            num = (4 * num - (at(2 * eps) - at(-2 * eps)) / (4 * eps)) / 3
        t.data[idx] = orig
        worst = max(worst, float(relative_error(t.grad[idx], num, floor)))
    return worst


def dump_tensor(t, fh) -> None:
    """Write the two-line text dump: shape, then row-major values (``%.17g``)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write(" ".join(str(d) for d in arr.shape) + "\n")
    fh.write(" ".join("%.17g" % v for v in arr.reshape(-1)) + "\n")


def load_tensor(fh, requires_grad: bool = False) -> Tensor:
    shape_line = fh.readline()
    values_line = fh.readline()
    shape = tuple(int(s) for s in shape_line.split())
    values = np.array([float(v) for v in values_line.split()], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"tensor dump: {values.size} values for shape {list(shape)}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
