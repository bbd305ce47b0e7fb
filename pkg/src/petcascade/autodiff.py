"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the 3D denoiser needs are provided.  Volumetric tensors
are laid out ``(batch, channel, x, y, z)``.  Every op builds its output with
a closure that maps the output gradient to input gradients; ``backward``
walks the recorded graph in reverse topological order.

Recording can be switched off with :func:`no_grad` for inference.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


def is_recording() -> bool:
    return _RECORDING[0]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"grad shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor is not part of a recorded graph")

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
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
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float):
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def silu(a):
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), backward)


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum_all(a):
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape):
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# --- dense layers --------------------------------------------------------------

def linear(x, w, b=None):
    """``x @ w.T + b`` for ``x`` of shape (batch, in) and ``w`` of shape (out, in)."""
    x, w = _as_tensor(x), _as_tensor(w)
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward)


def _shift_geometry(spatial, k):
    # Pad by k // 2 and flatten: every kernel tap is then a constant flat offset from
    # the output voxel's base index, so a tap is one GEMM on a strided view.  Outputs
    # live on an (X, Y+2p, Z+2p) grid and are cropped afterwards.
    p = k // 2
    X, Y, Z = spatial
    SY, SZ = Y + 2 * p, Z + 2 * p
    offsets = [i * SY * SZ + j * SZ + l for i, j, l in itertools.product(range(k), repeat=3)]
    L = X * SY * SZ
    return p, SY, SZ, offsets, L, L + offsets[-1]


def _pad_flat(x, k):
    B, C, X, Y, Z = x.shape
    p, SY, SZ, _, _, flat_len = _shift_geometry((X, Y, Z), k)
    xf = np.zeros((B, C, flat_len), dtype=x.dtype)
    xf[:, :, : (X + 2 * p) * SY * SZ].reshape(B, C, X + 2 * p, SY, SZ)[
        :, :, p:p + X, p:p + Y, p:p + Z] = x
    return xf


def _tap_gemm(xf, taps, offsets, L):
    B = xf.shape[0]
    out = np.zeros((B, taps.shape[1], L), dtype=np.result_type(xf, taps))
    for n in range(B):
        acc = out[n]
        for t, off in enumerate(offsets):
            acc += taps[t] @ xf[n, :, off:off + L]
    return out


def conv3d(x, w, b=None, pad=None):
    """Stride-1 'same' 3D convolution (cross-correlation) with zero padding.

    ``x``: (B, Cin, X, Y, Z); ``w``: (Cout, Cin, k, k, k) with odd k.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv3d expects 5D input and weight")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if x.shape[1] != cin:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {cin}")
    if pad is not None and pad != k // 2:
        raise ValueError("only 'same' padding (k // 2) is supported")
    B, _, X, Y, Z = x.shape
    p, SY, SZ, offsets, L, _ = _shift_geometry((X, Y, Z), k)
    taps = np.ascontiguousarray(w.data.reshape(cout, cin, -1).transpose(2, 0, 1))

    xf = _pad_flat(x.data, k) if k > 1 else x.data.reshape(B, cin, L)
    out = _tap_gemm(xf, taps, offsets, L)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out += b.data[None, :, None]
        parents.append(b)
    out = out.reshape(B, cout, X, SY, SZ)
    if k > 1:
        out = np.ascontiguousarray(out[:, :, :, :Y, :Z])
    saved = xf if (w.requires_grad and _RECORDING[0]) else None

    def backward(g):
        if k == 1:
            g2 = g.reshape(B, cout, L)
        else:
            gp = np.zeros((B, cout, X, SY, SZ), dtype=g.dtype)
            gp[:, :, :, :Y, :Z] = g
            g2 = gp.reshape(B, cout, L)
        dx = None
        if x.requires_grad:
            # the input gradient is a 'same' convolution of g with the flipped,
            # channel-transposed kernel
            flipped = np.ascontiguousarray(taps[::-1].transpose(0, 2, 1))
            gf = _pad_flat(g, k) if k > 1 else g.reshape(B, cout, L)
            dx = _tap_gemm(gf, flipped, offsets, L).reshape(B, cin, X, SY, SZ)
            if k > 1:
                dx = np.ascontiguousarray(dx[:, :, :, :Y, :Z])
        dw = None
        if saved is not None:
            dtaps = np.zeros((len(offsets), cout, cin), dtype=g.dtype)
            for n in range(B):
                for t, off in enumerate(offsets):
                    dtaps[t] += g2[n] @ saved[n, :, off:off + L].T
            dw = dtaps.transpose(1, 2, 0).reshape(w.shape)
        grads = [dx, dw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return _make(out, parents, backward)


# --- normalisation / resampling ----------------------------------------------

def group_norm(x, groups: int, eps: float = 1e-5):
    """Normalise each (sample, channel-group) to zero mean and unit variance."""
    x = _as_tensor(x)
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xg.shape[2]

    def backward(g):
        gg = g.reshape(B, groups, -1)
        gsum = gg.sum(axis=2, keepdims=True)
        gxsum = (gg * xhat).sum(axis=2, keepdims=True)
        dx = inv / n * (n * gg - gsum - xhat * gxsum)
        return (dx.reshape(x.shape),)

    return _make(xhat.reshape(x.shape), (x,), backward)


def avg_pool2(x):
    """2x2x2 average pooling on the spatial axes."""
    x = _as_tensor(x)
    B, C, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"spatial dims {x.shape[2:]} must be even for pooling")
    out = x.data.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2).mean(axis=(3, 5, 7))

    def backward(g):
        g8 = g[:, :, :, None, :, None, :, None] / 8.0
        return (np.broadcast_to(g8, (B, C, X // 2, 2, Y // 2, 2, Z // 2, 2))
                .reshape(x.shape).astype(x.dtype, copy=False),)

    return _make(out, (x,), backward)


def upsample2(x):
    """Nearest-neighbour x2 upsampling on the spatial axes."""
    x = _as_tensor(x)
    B, C, X, Y, Z = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (B, C, X, 2, Y, 2, Z, 2)
    ).reshape(B, C, 2 * X, 2 * Y, 2 * Z)

    def backward(g):
        return (g.reshape(B, C, X, 2, Y, 2, Z, 2).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward)


def modulate(x, scale_, shift):
    """Feature-wise affine modulation ``x * (1 + scale) + shift``.

    ``scale_`` and ``shift`` are (B, C) tensors broadcast over space.
    """
    x, scale_, shift = _as_tensor(x), _as_tensor(scale_), _as_tensor(shift)
    s = scale_.data[:, :, None, None, None]
    out = x.data * (1.0 + s) + shift.data[:, :, None, None, None]

    def backward(g):
        return (g * (1.0 + s),
                (g * x.data).sum(axis=(2, 3, 4)),
                g.sum(axis=(2, 3, 4)))

    return _make(out, (x, scale_, shift), backward)
