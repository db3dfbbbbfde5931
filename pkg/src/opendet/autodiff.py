"""Reverse-mode differentiation over dense float64 numpy tensors.

A :class:`Tape` records every operation whose result depends on a
registered parameter (or on a leaf created with ``requires_grad=True``).
Because nodes are appended as they are created, the tape order is already a
topological order and :func:`backward` is a single reverse sweep.

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    y = (tape.constant([[1.0, 2.0]]) @ w).sum()
    grads = backward(tape, y)      # {"w": array([[1., 1.], [2., 2.]])}
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError

LOG_CLAMP = 1e-12
OUTSIDE = -1e6  # grid coordinate that always samples to zero


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "grad", "_parents", "_grad_fn", "id")

    def __init__(self, data, tape, requires_grad=False, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._grad_fn = grad_fn
        self.id = tape._record(self) if requires_grad else -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._wrap(other)))

    def __rsub__(self, other):
        return add(self._wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def _wrap(self, other):
        return other if isinstance(other, Tensor) else Tensor(other, self.tape)


class Tape:
    """Ordered record of differentiable operations plus a parameter registry."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def _record(self, t):
        self.nodes.append(t)
        return len(self.nodes) - 1

    def param(self, name, value):
        if name in self.params:
            raise DomainError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64), self, requires_grad=True)
        self.params[name] = t
        return t

    def bind(self, store):
        """Register every array of a ``{name: array}`` store; returns tensors."""
        return {name: self.param(name, value) for name, value in store.items()}

    def constant(self, value):
        return Tensor(value, self)

    def leaf(self, value):
        """Unregistered leaf that still receives a gradient (for checks)."""
        return Tensor(np.array(value, dtype=np.float64), self, requires_grad=True)


def backward(tape, seed):
    """Reverse sweep from a scalar node; returns ``{param name: gradient}``."""
    if seed.data.size != 1:
        raise DomainError(f"backward seed must be scalar, got shape {seed.shape}")
    for node in tape.nodes:
        node.grad = None
    if not seed.requires_grad:
        return {name: np.zeros_like(p.data) for name, p in tape.params.items()}
    seed.grad = np.ones_like(seed.data)
    for node in reversed(tape.nodes[: seed.id + 1]):
        g = node.grad
        if g is None or node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if node is not seed:
            node.grad = None  # free interior gradients early
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in tape.params.items()}


def make_node(data, parents, grad_fn):
    """Create an op result. ``grad_fn(g)`` returns one gradient per parent."""
    tape = parents[0].tape
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, tape, requires_grad=needs, parents=tuple(parents),
                  grad_fn=grad_fn if needs else None)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, a._wrap(b)
    return b._wrap(a), b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _pair(a, b)
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x):
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x):
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,))


def log(x):
    """Natural log with the argument clamped below at ``LOG_CLAMP``."""
    arg = np.maximum(x.data, LOG_CLAMP)
    live = x.data > LOG_CLAMP
    return make_node(np.log(arg), (x,), lambda g: (g * live / arg,))


def abs_(x):
    s = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * s,))


def sin(x):
    return make_node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    return make_node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(x.data[idx], (x,), grad_fn)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=-1):
    tensors = list(tensors)
    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors,
                     lambda g: tuple(np.moveaxis(g, axis, 0)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul extents {a.shape} @ {b.shape}")

    def grad_fn(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data if a.requires_grad else None
            gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(0) if b.requires_grad else None
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_node(a.data @ b.data, (a, b), grad_fn)


@dataclass
class LinearParams:
    weight: object  # [in, out]
    bias: object  # [out]

    @property
    def dims(self):
        return np.shape(_data(self.weight))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def linear_forward(x, params):
    """``y = x W + b`` over the trailing axis of ``x``."""
    w, b = params.weight, params.bias
    if x.shape[-1] != np.shape(_data(w))[0]:
        raise ShapeError(f"linear expects trailing extent {np.shape(_data(w))[0]}, got {x.shape}")
    return matmul(x, w) + b


def mlp_forward(x, layers, final_activation=None):
    """Linear layers with ReLU between them."""
    for i, layer in enumerate(layers):
        x = linear_forward(x, layer)
        if i < len(layers) - 1:
            x = relu(x)
    if final_activation is not None:
        x = final_activation(x)
    return x


def layers_from(params, prefix, n):
    """``LinearParams`` for ``{prefix}.{i}.w/.b``, i < n."""
    return [LinearParams(params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"]) for i in range(n)]


def init_linear(rng, n_in, n_out, zero=False, bias=0.0):
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        lim = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-lim, lim, size=(n_in, n_out))
    return w, np.full(n_out, float(bias))


def init_mlp(rng, prefix, dims, zero_last=False):
    store = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w, bias = init_linear(rng, a, b, zero=zero_last and i == len(dims) - 2)
        store[f"{prefix}.{i}.w"] = w
        store[f"{prefix}.{i}.b"] = bias
    return store


# ---------------------------------------------------------------- normalisation / attention

def softmax(x, axis=-1):
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_node(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gain, bias = x._wrap(gain), x._wrap(bias)

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return make_node(xhat * gain.data + bias.data, (x, gain, bias), grad_fn)


def attention(q, k, v, scale=None, bias=None):
    """Single-head scaled dot-product attention; returns ``(out, weights)``.

    ``bias`` (array or Tensor broadcastable to the logits) is added before
    the softmax.
    """
    scale = 1.0 / np.sqrt(q.shape[-1]) if scale is None else scale
    logits = (q @ transpose(k)) * scale
    if bias is not None:
        logits = logits + bias
    w = softmax(logits, axis=-1)
    return w @ v, w


# ---------------------------------------------------------------- sampling / projection

def bilinear_sample(grid, coords):
    """Sample feature grids at fractional ``(row, col)`` positions.

    ``grid`` is ``[C, H, W]`` with ``coords`` ``[P, 2]`` (output ``[P, C]``), or
    batched ``[V, C, H, W]`` with ``coords`` ``[V, P, 2]`` (output
    ``[V, P, C]``). Integer positions address cell values; corners falling
    outside the grid contribute zero. Differentiable in both arguments.
    """
    single = grid.ndim == 3
    if single:
        grid = reshape(grid, (1,) + grid.shape)
        coords = reshape(coords, (1,) + coords.shape)
    n_views, n_ch, height, width = grid.shape
    n_pts = coords.shape[1]
    rc = np.nan_to_num(coords.data, nan=OUTSIDE)
    r, c = rc[..., 0], rc[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr, fc = r - r0, c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    flat = grid.data.transpose(0, 2, 3, 1).reshape(-1, n_ch)
    base = np.arange(n_views)[:, None] * (height * width)

    corners = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        idx = np.where(inside, base + rr * width + cc, 0)
        vals = flat[idx] * inside[..., None]
        corners.append((idx, inside, vals))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = (v00 * w00[..., None] + v01 * w01[..., None]
           + v10 * w10[..., None] + v11 * w11[..., None])
    finite = np.isfinite(coords.data).all(axis=-1)

    def grad_fn(g):
        ggrid = None
        if grid.requires_grad:
            acc = np.zeros_like(flat)
            for (idx, inside, _), w in zip(corners, (w00, w01, w10, w11)):
                wt = (w * inside).ravel()
                gi = g.reshape(-1, n_ch) * wt[:, None]
                for ch in range(n_ch):
                    acc[:, ch] += np.bincount(idx.ravel(), weights=gi[:, ch], minlength=acc.shape[0])
            ggrid = acc.reshape(n_views, height, width, n_ch).transpose(0, 3, 1, 2)
        gcoords = None
        if coords.requires_grad:
            d_r = (1 - fc)[..., None] * (v10 - v00) + fc[..., None] * (v11 - v01)
            d_c = (1 - fr)[..., None] * (v01 - v00) + fr[..., None] * (v11 - v10)
            gcoords = np.stack([(g * d_r).sum(-1), (g * d_c).sum(-1)], axis=-1)
            gcoords *= finite[..., None]
        return ggrid, gcoords

    res = make_node(out, (grid, coords), grad_fn)
    if single:
        res = reshape(res, (n_pts, n_ch))
    return res


def perspective_project(points, matrix, min_depth=1e-6):
    """Project 3D points through an affine 4x4 ``matrix`` to grid ``(row, col)``.

    ``matrix`` maps points to ``(u*z, v*z, z, 1)``; the pixel ``(u, v)`` is
    converted to grid coordinates ``(v - 0.5, u - 0.5)`` so that pixel
    centers land on integer grid positions. A stack of matrices ``[V, 4, 4]``
    applies one matrix per leading index of ``points``. Points with
    ``z <= min_depth`` get coordinates that sample to zero and no gradient.
    Returns ``(coords, valid)`` where ``valid`` is a boolean numpy mask.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if np.max(np.abs(m[..., 3, :] - [0, 0, 0, 1])) > 1e-12:
        raise DomainError("projection matrix must be affine")
    rot, trans = m[..., :3, :3], m[..., :3, 3]
    if m.ndim == 2:
        h = points.data @ rot.T + trans
    else:
        flat = points.data.reshape(m.shape[0], -1, 3)
        h = (np.einsum("vpj,vij->vpi", flat, rot) + trans[:, None]).reshape(points.shape)
    z = h[..., 2]
    valid = z > min_depth
    zs = np.where(valid, z, 1.0)
    u = h[..., 0] / zs
    v = h[..., 1] / zs
    coords = np.stack([np.where(valid, v - 0.5, OUTSIDE), np.where(valid, u - 0.5, OUTSIDE)], axis=-1)

    def grad_fn(g):
        gr, gc = g[..., 0] * valid, g[..., 1] * valid
        gh = np.stack([gc / zs, gr / zs, -(gc * u + gr * v) / zs], axis=-1)
        if m.ndim == 2:
            return (gh @ rot,)
        flat_g = gh.reshape(m.shape[0], -1, 3)
        return (np.einsum("vpi,vij->vpj", flat_g, rot).reshape(points.shape),)

    return make_node(coords, (points,), grad_fn), valid


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with optional decoupled weight decay (off by default)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"OPENCKPT"
CKPT_VERSION = 1


def encode_checkpoint(params):
    """Serialize ``{name: array}``: magic, version u32, then per parameter
    (name length u32, utf-8 name, rank u32, extents u64 each, f64 LE values)."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob):
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = blob[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    params = {}
    while pos < len(blob):
        (n,) = struct.unpack("<I", take(4, "name length"))
        name = take(n, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        params[name] = values.astype(np.float64).reshape(shape)
    return params


def atomic_write(path, data):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params):
    atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
