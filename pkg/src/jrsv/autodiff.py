"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a node holding its forward value, its parents and a closure
that maps the output cotangent to parent cotangents (a vector-Jacobian
product).  ``backward`` walks the graph once in reverse topological order.

Conventions:

* the subgradient of ``abs`` and ``relu`` at exactly 0 is 0;
* ``stop_gradient`` truncates the graph, so nothing upstream of it is
  visited during ``backward``;
* a graph can be backpropagated once; interior closures are released
  afterwards and a second call raises.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEBUG = False
"""When true, every op checks that its forward value is finite."""

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, frozen modules).

    The switch is per thread, so concurrent decoders do not interfere.
    """
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    out = Tensor(value, op=op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite_input(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.value)):
        raise FloatingPointError(f"{op} of non-finite input")


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), backward, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * c,)

    return _make(a.value * c, (a,), backward, "scalar_mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.value

    def backward(g):
        return (-g * out * out,)

    return _make(out, (a,), backward, "reciprocal")


def square(a: Tensor) -> Tensor:
    av = a.value

    def backward(g):
        return (2.0 * g * av,)

    return _make(av * av, (a,), backward, "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


# -- linear algebra and shape ops -------------------------------------------

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including batched operands with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(av @ bv, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.value, axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _make(a.value.reshape(shape), (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward, "concat")


def slice_(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the VJP scatters with ``np.add.at``."""
    src = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        out = np.zeros(src)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] += g
        return (out,)

    return _make(a.value[index], (a,), backward, "slice")


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding, ``pad_width`` as for ``np.pad``."""
    pad_width = [tuple(p) for p in pad_width]
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))

    def backward(g):
        return (g[index],)

    return _make(np.pad(a.value, pad_width), (a,), backward, "pad")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scalar_mul(sum_(a, axis, keepdims), 1.0 / n)


# -- nonlinearities -----------------------------------------------------------

def abs_(a: Tensor) -> Tensor:
    av = a.value

    def backward(g):
        return (g * np.sign(av),)

    return _make(np.abs(av), (a,), backward, "abs")


def relu(a: Tensor) -> Tensor:
    av = a.value
    mask = av > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, av, 0.0), (a,), backward, "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), backward, "sigmoid")


def swish(a: Tensor) -> Tensor:
    av = a.value
    s = _sigmoid(av)

    def backward(g):
        return (g * (s + av * s * (1.0 - s)),)

    return _make(av * s, (a,), backward, "swish")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)

    def backward(g):
        return (g * e,)

    return _make(e, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    _check_finite_input(a, "log")
    av = a.value

    def backward(g):
        return (g / av,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make(out, (a,), backward, "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite_input(a, "softmax")
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite_input(a, "log_softmax")
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx = g
        out = []
        if weight is not None:
            gx = g * weight.value
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        proj = (gx * xhat).mean(axis=-1, keepdims=True)
        out.append(inv * (gx - gxhat_mean - xhat * proj))
        if weight is not None:
            out.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            out.append(_unbroadcast(g, bias.shape))
        return tuple(out)

    y = xhat
    if weight is not None:
        y = y * weight.value
    if bias is not None:
        y = y + bias.value
    parents = [a] + [p for p in (weight, bias) if p is not None]
    return _make(y, parents, backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (shape [n, d]) by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    n = table.shape[0]

    def backward(g):
        out = np.zeros((n,) + table.shape[1:])
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.value[ids], (table,), backward, "embedding")


def dropout(a: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with an explicit 0/1 keep mask."""
    if rate <= 0.0:
        return a
    scale = np.asarray(mask, dtype=np.float64) / (1.0 - rate)

    def backward(g):
        return (g * scale,)

    return _make(a.value * scale, (a,), backward, "dropout")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; the result is a fresh leaf so nothing flows back."""
    out = Tensor(a.value, op="stop_gradient")
    return out


# -- convolutions -------------------------------------------------------------

def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Time-major depthwise convolution with 'same' zero padding.

    ``x`` is [T, C], ``weight`` is [C, k] with odd ``k``;
    ``out[t, c] = sum_j xpad[t + j, c] * weight[c, j]``.
    """
    T, C = x.shape
    Cw, k = weight.shape
    if Cw != C:
        raise ValueError(f"depthwise conv channel mismatch: {C} vs {Cw}")
    if k % 2 != 1:
        raise ValueError("depthwise conv kernel must be odd")
    half = k // 2
    xp = np.pad(x.value, ((half, half), (0, 0)))
    wv = weight.value
    win = as_strided(xp, shape=(T, k, C), strides=(xp.strides[0], xp.strides[0], xp.strides[1]))
    out = np.einsum("tjc,cj->tc", win, wv)
    if bias is not None:
        out = out + bias.value

    def backward(g):
        gw = np.einsum("tjc,tc->cj", win, g)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + T] += g * wv[:, j]
        grads = [gxp[half:half + T], gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, backward, "depthwise_conv1d")


def pointwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-size-1 convolution over time-major input: an affine map per frame."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """Valid 2-D cross-correlation.

    ``x`` is [C_in, H, W], ``weight`` is [C_out, C_in, kh, kw]; the output is
    [C_out, (H - kh)//sh + 1, (W - kw)//sw + 1].
    """
    Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin != Cin_w:
        raise ValueError(f"conv2d channel mismatch: {Cin} vs {Cin_w}")
    sh, sw = stride
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d input {H}x{W} too small for kernel {kh}x{kw}")
    xv = np.ascontiguousarray(x.value)
    s0, s1, s2 = xv.strides
    win = as_strided(xv, shape=(Cin, Ho, Wo, kh, kw), strides=(s0, s1 * sh, s2 * sw, s1, s2))
    wv = weight.value
    out = np.tensordot(wv, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.value[:, None, None]

    def backward(g):
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        gx = np.zeros_like(xv)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(wv[:, :, i, j], g, axes=([0], [0]))
                gx[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += contrib
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, backward, "conv2d")


# -- graph traversal ----------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph has already been backpropagated")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise RuntimeError("graph has already been backpropagated")
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._consumed = True
    loss._consumed = True


def grad_or_zeros(t: Tensor) -> np.ndarray:
    return np.zeros(t.shape) if t.grad is None else t.grad


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-3, max_coords: int | None = None,
               rng: np.random.Generator | None = None, exclude: Iterable[int] = ()) -> float:
    """Compare analytic gradients against central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called with them
    (positionally) and must return a scalar.  With ``max_coords`` set, that
    many coordinates per input are sampled with ``rng``.  Inputs listed in
    ``exclude`` (by position) get their analytic gradient computed but are
    not compared, which is how branches behind ``stop_gradient`` are handled.

    Returns the max over compared coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.value = np.ascontiguousarray(t.value)
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [grad_or_zeros(t).copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    skip = set(exclude)
    worst = 0.0
    with no_grad():
        for k, t in enumerate(inputs):
            if k in skip:
                continue
            flat = t.value.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                ana = analytic[k].reshape(-1)[i]
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                worst = max(worst, err)
    return worst
