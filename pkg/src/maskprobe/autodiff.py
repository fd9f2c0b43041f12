"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and remembers the primitive that
produced it.  Calling :func:`forward_backward` on a scalar root walks the
graph once in reverse topological order and returns gradients for the
requested leaves.  Backward rules only run for parents that lie on a path to
one of those leaves, so input-gradient queries never pay for weight
gradients and vice versa.

Example::

    >>> x = Tensor(3.0, requires_grad=True)
    >>> forward_backward(x * x, [x])[x]
    array(6.)
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NonFiniteError

DTYPE = np.float64

# backward(out_grad, needs) -> one gradient (or None) per parent
BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class Tensor:
    """A value in a computation graph."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: BackwardFn | None = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward) -> Tensor:
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op,
                  parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _node(a.data + b.data, "add", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g, needs: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _node(a.data * b.data, "mul", (a, b), backward)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _node(out, "div", (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g, needs: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g, needs: (g * mask,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,), lambda g, needs: (g * np.sign(a.data),))


def clip(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient flows only where the input is strictly inside."""
    a = as_tensor(a)
    lo_arr = np.asarray(lo, dtype=DTYPE)
    hi_arr = np.asarray(hi, dtype=DTYPE)
    out = np.clip(a.data, lo_arr, hi_arr)
    inside = (a.data > lo_arr) & (a.data < hi_arr)
    return _node(out, "clip", (a,), lambda g, needs: (g * inside,))


def sign(x) -> np.ndarray:
    """Sign with ``sign(0) == 0``.  Not differentiable; returns an array."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    return np.sign(data)


# --------------------------------------------------------------------------
# reductions and shape

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def amax(a, axis=-1, mask=None) -> Tensor:
    """Max along ``axis`` over entries where ``mask`` is true.

    Gradient goes to the first maximising entry only.
    """
    a = as_tensor(a)
    masked = a.data if mask is None else np.where(mask, a.data, -np.inf)
    idx = np.argmax(masked, axis=axis)
    out = np.take_along_axis(masked, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g, needs):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _node(out, "max", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,),
                 lambda g, needs: (g.reshape(a.shape),))


def dot(a, b, axis=-1) -> Tensor:
    """Inner product along ``axis`` (batched)."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        g = np.expand_dims(g, axis)
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _node((a.data * b.data).sum(axis=axis), "dot", (a, b), backward)


def l2norm(a, axis=-1, keepdims=False, eps=0.0) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` is added to the result."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = denom if keepdims else denom.squeeze(axis)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(norm > 0, norm, 1.0)
        return (g * np.where(norm > 0, a.data / safe, 0.0),)

    return _node(out, "l2norm", (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


# --------------------------------------------------------------------------
# softmax family

def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g, needs):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, "log_softmax", (a,), backward)


# --------------------------------------------------------------------------
# convolution

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    xp = _pad(x.data, padding)
    n, c, hp, wp = xp.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ContractViolation(f"conv2d: input has {c} channels, weights expect {ci}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractViolation("conv2d: kernel larger than padded input")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # (n, c, oh, ow, kh, kw)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (n, oh, ow, co)
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + parents[2].data.reshape(1, -1, 1, 1)

    def backward(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    # (n, co, oh, ow) x (co, c) -> (n, oh, ow, c)
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        if needs[1]:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (co, c, kh, kw)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)[:len(parents)]

    return _node(out, "conv2d", parents, backward)


# --------------------------------------------------------------------------
# backward pass

def _topological(root: Tensor) -> list[Tensor]:
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


def forward_backward(root: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to each leaf in ``wrt``.

    Leaves that do not influence ``root`` get a zero gradient.  Graph values
    are left untouched, so the call may be repeated.
    """
    wrt = list(wrt)
    if root.data.size != 1:
        raise ContractViolation(f"forward_backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    targets = {id(t) for t in wrt}
    needed: dict[int, bool] = {}
    for node in order:  # parents precede children
        needed[id(node)] = id(node) in targets or any(needed[id(p)] for p in node._parents)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None or not needed[id(node)]:
            continue
        needs = [needed[id(p)] for p in node._parents]
        for p, pg, need in zip(node._parents, node._backward(g, needs), needs):
            if not need or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def grad(fn: Callable[..., Tensor], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Value and gradient of ``fn`` at numpy arguments."""
    leaves = [Tensor(a, requires_grad=True) for a in args]
    out = fn(*leaves)
    g = forward_backward(out, leaves)
    return out.item(), [g[leaf] for leaf in leaves]


def finite_difference_gradient(fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of an array."""
    if not h > 0:
        raise ContractViolation(f"finite difference step must be positive, got {h}")
    x = np.array(point, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(k) for k in np.unravel_index(i, x.shape))
            raise NonFiniteError(f"non-finite function value perturbing coordinate {idx}")
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


# --------------------------------------------------------------------------
# random numbers

class RngState:
    """Seeded Philox (counter-based) stream with named, splittable substreams.

    ``RngState(seed).split("data")`` always yields the same substream for the
    same seed and key, independent of how much the parent was consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, name: str | int) -> "RngState":
        k = name if isinstance(name, int) else zlib.crc32(name.encode("utf-8"))
        return RngState(self.seed, self.key + (k,))

    def __repr__(self):
        return f"RngState(seed={self.seed}, key={self.key})"


def uniform_noise(shape, lo: float, hi: float, rng: RngState) -> np.ndarray:
    """I.i.d. samples from ``[lo, hi)``; advances ``rng``."""
    if not lo < hi:
        raise ContractViolation(f"uniform_noise needs lo < hi, got [{lo}, {hi})")
    return rng.generator.uniform(lo, hi, size=shape)
