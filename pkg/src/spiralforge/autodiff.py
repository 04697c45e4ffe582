"""Minimal reverse-mode differentiation over numpy arrays.

Only what the denoiser and its SSIM loss need: elementwise arithmetic with
scalar/array broadcasting, reductions, relu, 3x3 convolutions (stride 1 or 2,
zero padding 1), nearest-neighbour 2x upsampling, channel concatenation,
reshape, transpose and a separable 'valid' filter. Feature maps are
channels-last [B, H, W, C].

Example:
    >>> x = Tensor(np.ones((1, 4, 4, 1)), requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad[0, 0, 0, 0]
    2.0
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # graph ---------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg

    # arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _binary(_lift(other, self), self, np.subtract, lambda g, a, b: (g, -g))

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _binary(_lift(other, self), self, np.divide, lambda g, a, b: (g / b, -g * a / (b * b)))

    def __neg__(self):
        return Tensor(-self.data, self.requires_grad, (self,), lambda g: (-g,))

    def __getitem__(self, idx):
        shape = self.data.shape

        def back(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], self.requires_grad, (self,), back)

    # reductions and shape ------------------------------------------------

    def sum(self, axis=None):
        shape = self.data.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis), self.requires_grad, (self,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor(self.data.reshape(*shape), self.requires_grad, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return Tensor(self.data.transpose(axes), self.requires_grad, (self,), lambda g: (g.transpose(inv),))

    def relu(self):
        mask = self.data > 0
        return Tensor(self.data * mask, self.requires_grad, (self,), lambda g: (g * mask,))


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, fn, grads):
    a = _lift(a, b)
    b = _lift(b, a)

    def back(g):
        ga, gb = grads(g, a.data, b.data)
        return (_unbroadcast(ga, a.data.shape) if a.requires_grad else None,
                _unbroadcast(gb, b.data.shape) if b.requires_grad else None)

    return Tensor(fn(a.data, b.data), a.requires_grad or b.requires_grad, (a, b), back)


# ---------------------------------------------------------------------------
# image ops

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Square-kernel cross-correlation with 'same' zero padding.

    Args:
        x: [B, H, W, Cin].
        w: [Cout, Cin, k, k] with odd k.
        b: [Cout] or None.
        stride: 1 or 2; output size is ceil(H / stride).
    """
    k = w.shape[-1]
    pad = k // 2
    bsz, h, wd, cin = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    # explicit im2col; slices keep channels innermost so each copy is cheap
    cols = np.empty((bsz, ho, wo, k, k, cin), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    cm = cols.reshape(-1, k * k * cin)
    wm = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cm @ wm.T
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cm).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gc = (g2 @ wm).reshape(bsz, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gc[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, x.requires_grad or w.requires_grad or (b is not None and b.requires_grad),
                  parents, (lambda g: back(g)[:2]) if b is None else back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the spatial axes of [B, H, W, C]."""
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def back(g):
        bsz, h, w, c = g.shape
        return (g.reshape(bsz, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)

    return Tensor(out, x.requires_grad, (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(edges[i], edges[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  any(t.requires_grad for t in tensors), tuple(tensors), back)


def filter_valid(x: Tensor, window: np.ndarray, axis: int) -> Tensor:
    """1-D 'valid' correlation with ``window`` along ``axis``."""
    k = window.shape[0]
    xd = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(sliding_window_view(xd, k, axis=-1) @ window, -1, axis)

    def back(g):
        gd = np.moveaxis(g, axis, -1)
        pad = [(0, 0)] * (gd.ndim - 1) + [(k - 1, k - 1)]
        full = sliding_window_view(np.pad(gd, pad), k, axis=-1) @ window[::-1]
        return (np.moveaxis(full, -1, axis),)

    return Tensor(out, x.requires_grad, (x,), back)


def blur_valid(x: Tensor, window: np.ndarray) -> Tensor:
    """Separable 'valid' filtering over the last two axes (matches ``metrics.blur_valid``)."""
    return filter_valid(filter_valid(x, window, -1), window, -2)
