"""Small tape-based reverse-mode autodiff over numpy arrays.

Only what the encoders and the denoiser need: elementwise arithmetic with
broadcasting, matmul, reductions, reshapes, and a handful of network
primitives (linear, conv2d, group/layer norm, GELU, pooling, concat, FiLM).
Custom operations with a hand-written vector-Jacobian product are built with
:func:`custom_op`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import _kernels


class Tensor:
    """An array plus the information needed to push gradients to its inputs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, vjp in zip(node._parents, node._vjps):
                if not p.requires_grad:
                    continue
                gp = vjp(g)
                grads[id(p)] = gp if id(p) not in grads else grads[id(p)] + gp

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjps) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def custom_op(data, parents, vjps) -> Tensor:
    """Wrap a value computed outside the tape with explicit VJP closures."""
    return _node(np.asarray(data, dtype=float), [as_tensor(p) for p in parents], vjps)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, [a, b],
                 [lambda g: unbroadcast(g, a.shape), lambda g: unbroadcast(g, b.shape)])


def neg(a) -> Tensor:
    return _node(-a.data, [a], [lambda g: -g])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, [a, b],
                 [lambda g: unbroadcast(g * b.data, a.shape),
                  lambda g: unbroadcast(g * a.data, b.shape)])


def power(a, k: float) -> Tensor:
    return _node(a.data**k, [a], [lambda g: g * k * a.data ** (k - 1)])


def square(a) -> Tensor:
    return _node(a.data * a.data, [a], [lambda g: 2.0 * g * a.data])


def sqrt(a) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, [a], [lambda g: 0.5 * g / out])


def gelu(x) -> Tensor:
    """Exact GELU ``x * Phi(x)``."""
    phi = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _node(x.data * phi, [x], [lambda g: g * (phi + x.data * pdf)])


# linear algebra / shape -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, [a, b],
                 [lambda g: unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                  lambda g: unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)])


def tsum(a, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()
    return _node(a.data.sum(axis=axis, keepdims=keepdims), [a], [vjp])


def tmean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return _node(a.data.reshape(shape), [a], [lambda g: g.reshape(a.shape)])


def transpose(a, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), [a], [lambda g: g.transpose(inv)])


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        first = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if other != first:
            raise ValueError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    edges = np.cumsum([0] + [t.shape[ax] for t in tensors])
    vjps = []
    for i in range(len(tensors)):
        lo, hi = edges[i], edges[i + 1]
        vjps.append(lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=ax))
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjps)


# network primitives --------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape ``(in, out)``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x (B, C, H, W)``, ``w (O, C, kh, kw)``, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)          # (B, ho, wo, C*kh*kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)                  # (B, O, ho, wo)

    def vjp_x(g):
        gcols = g.transpose(0, 2, 3, 1) @ wmat
        gx = _kernels.col2im(gcols, c, hp, wp, kh, kw, stride)
        return gx[:, :, padding:padding + h, padding:padding + wd]

    def vjp_w(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        return (gm.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)

    res = _node(out, [x, w], [vjp_x, vjp_w])
    if b is not None:
        res = add(res, reshape(b, (1, o, 1, 1)))
    return res


def _normalize_vjp(xhat, inv_std, axes, n):
    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return inv_std * (g - gm - xhat * gxm)
    return vjp


def _standardize(x, axes, eps):
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    n = np.prod([x.shape[a] for a in axes])
    return _node(xhat, [x], [_normalize_vjp(xhat, inv_std, axes, n)])


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    xhat = _standardize(x, (-1,), eps)
    return add(mul(xhat, gamma), beta)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    bsz, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = reshape(x, (bsz, groups, c // groups, h, w))
    xhat = reshape(_standardize(xg, (2, 3, 4), eps), (bsz, c, h, w))
    return add(mul(xhat, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))


def global_avg_pool(x) -> Tensor:
    return tmean(x, axis=(2, 3))


def avg_pool(x, p: int) -> Tensor:
    bsz, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"avg_pool: grid {h}x{w} not divisible by {p}")
    return tmean(reshape(x, (bsz, c, h // p, p, w // p, p)), axis=(3, 5))


def film_modulate(x, scale, shift) -> Tensor:
    """Feature-wise affine modulation ``x * scale + shift``."""
    return add(mul(x, scale), shift)


def sinusoidal_time_embed(t_frac, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sin/cos features of a diffusion time in ``[0, 1]`` (scaled to ``[0, 1000]``)."""
    t = np.atleast_1d(np.asarray(t_frac, dtype=float)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb


def mse(a, b) -> Tensor:
    return tmean(square(add(a, neg(as_tensor(b)))))


# optimizer ----------------------------------------------------------------

def adam_step(param, grad, m, v, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        ids = [id(p) for p in self.params]
        if len(set(ids)) != len(ids):
            raise ValueError("a parameter appears more than once in the optimizer")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.m[i], self.v[i] = adam_step(p.data, p.grad, self.m[i], self.v[i],
                                                     self.step_count, lr, self.beta1,
                                                     self.beta2, self.eps)
