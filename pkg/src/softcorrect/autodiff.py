"""A small reverse-mode autodiff library over dense float64 numpy arrays.

Layout is channels-first without a batch axis: ``(C, H, W)`` or ``(C, D, H, W)``.
Convolutions are fixed at kernel 3, padding 1, stride 1; pooling at kernel 2.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import ShapeError


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Optional[Callable[[np.ndarray], None]] = None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
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
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes do not keep their gradient
                    node.grad = None if node is not self else node.grad

    # arithmetic ---------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, name=None) -> Tensor:
    track = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, parents=parents if track else (),
                  backward=backward if track else None, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.sum(x.data), (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape)), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.mean(x.data), (x,), lambda g: x._accumulate(np.broadcast_to(g / n, x.shape)), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: x._accumulate(g * mask), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: x._accumulate(g * (1.0 - y * y)), "tanh")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def tile_channels(v: Tensor, spatial: Sequence[int]) -> Tensor:
    """Broadcast a ``(C,)`` vector to ``(C, *spatial)`` constant feature maps."""
    axes = tuple(range(1, len(spatial) + 1))
    out = np.broadcast_to(v.data.reshape((-1,) + (1,) * len(spatial)), (v.shape[0],) + tuple(spatial)).copy()
    return _result(out, (v,), lambda g: v._accumulate(g.sum(axis=axes)), "tile")


# convolution ----------------------------------------------------------------------

def _conv_raw(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded 'same' cross-correlation. Returns (output, im2col matrix)."""
    nd = x.ndim - 1
    spatial = x.shape[1:]
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * nd)
    win = sliding_window_view(xp, (3,) * nd, axis=tuple(range(1, nd + 1)))
    # (C, k..., spatial...) keeps the innermost copy loop contiguous
    perm = (0,) + tuple(range(nd + 1, 2 * nd + 1)) + tuple(range(1, nd + 1))
    cols = win.transpose(perm).reshape(-1, int(np.prod(spatial)))
    out = (w.reshape(w.shape[0], -1) @ cols).reshape((w.shape[0],) + spatial)
    return out, cols


def conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Kernel-3, padding-1, stride-1 convolution for 2D or 3D inputs.

    ``x``: ``(C_in, *spatial)``; ``w``: ``(C_out, C_in, 3, ...)``; ``b``: ``(C_out,)``.
    """
    nd = x.ndim - 1
    if nd not in (2, 3) or w.ndim != nd + 2 or w.shape[2:] != (3,) * nd:
        raise ShapeError(f"conv expects a {nd}D kernel of size 3, got weight shape {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv input has {x.shape[0]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    out, cols = _conv_raw(x.data, w.data)
    if b is not None:
        out = out + b.data.reshape((-1,) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(g.shape[0], -1)
        if w.requires_grad:
            w._accumulate((gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            flip = (slice(None), slice(None)) + (slice(None, None, -1),) * nd
            wt = np.swapaxes(w.data, 0, 1)[flip]
            x._accumulate(_conv_raw(g, wt)[0])

    return _result(out, parents, backward, "conv")


def maxpool(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max-pooling; odd trailing sizes keep a partial window.

    The backward pass routes each gradient to the first maximal element.
    """
    if kernel != 2:
        raise ShapeError("only kernel 2 pooling is supported")
    nd = x.ndim - 1
    spatial = x.shape[1:]
    out_sp = tuple((s + 1) // 2 for s in spatial)
    pad = [(0, 0)] + [(0, o * 2 - s) for o, s in zip(out_sp, spatial)]
    xp = np.pad(x.data, pad, constant_values=-np.inf)
    split = (x.shape[0],) + tuple(v for o in out_sp for v in (o, 2))
    perm = (0,) + tuple(1 + 2 * i for i in range(nd)) + tuple(2 + 2 * i for i in range(nd))
    win = xp.reshape(split).transpose(perm).reshape((x.shape[0],) + out_sp + (2 ** nd,))
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gp = gw.reshape((x.shape[0],) + out_sp + (2,) * nd).transpose(inv).reshape(xp.shape)
        x._accumulate(gp[(slice(None),) + tuple(slice(0, s) for s in spatial)])

    return _result(out, (x,), backward, "maxpool")


def upsample(x: Tensor, size: Optional[Sequence[int]] = None) -> Tensor:
    """Nearest-neighbour x2 upsampling, cropped to ``size`` when given."""
    nd = x.ndim - 1
    up = x.data
    for ax in range(1, nd + 1):
        up = np.repeat(up, 2, axis=ax)
    full = up.shape[1:]
    size = tuple(full if size is None else size)
    if any(s > f or s < f - 1 for s, f in zip(size, full)):
        raise ShapeError(f"cannot crop upsampled shape {full} to {size}")
    out = up[(slice(None),) + tuple(slice(0, s) for s in size)]

    def backward(g):
        gp = np.zeros((x.shape[0],) + full)
        gp[(slice(None),) + tuple(slice(0, s) for s in size)] = g
        split = (x.shape[0],) + tuple(v for s in x.shape[1:] for v in (s, 2))
        x._accumulate(gp.reshape(split).sum(axis=tuple(2 + 2 * i for i in range(nd))))

    return _result(out, (x,), backward, "upsample")


# gathers and geometry heads -------------------------------------------------------------

def take_cells(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Channel vectors at flattened spatial positions: ``(C, *sp) -> (N, C)``."""
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    idx = np.asarray(flat_index)

    def backward(g):
        gf = np.zeros_like(flat)
        np.add.at(gf.T, idx, g)
        x._accumulate(gf.reshape(x.shape))

    return _result(flat[:, idx].T, (x,), backward, "take")


def index_add(base, ids: np.ndarray, values: Tensor) -> Tensor:
    """``base`` with ``values`` added to rows ``ids`` (ids must be unique)."""
    base = _wrap(base)
    ids = np.asarray(ids)
    out = base.data.copy()
    out[ids] += values.data

    def backward(g):
        if base.requires_grad:
            base._accumulate(g)
        if values.requires_grad:
            values._accumulate(g[ids])

    return _result(out, (base, values), backward, "index_add")


def sparse_linear(W: sp.spmatrix, x: Tensor) -> Tensor:
    """``W @ x`` for a constant sparse matrix."""
    Wt = W.T.tocsr()
    return _result(W @ x.data, (x,), lambda g: x._accumulate(Wt @ g), "sparse_linear")


def chamfer_loss(points: Tensor, observed: np.ndarray) -> Tensor:
    """Mean distance from every observed point to its nearest point in ``points``.

    Correspondences are found on the forward pass and held fixed for the
    gradient; a zero-length match contributes a zero subgradient.
    """
    obs = np.asarray(observed, float).reshape(-1, 3)
    if len(obs) == 0 or points.shape[0] == 0:
        raise ShapeError("Chamfer loss of an empty cloud")
    _, idx = cKDTree(points.data).query(obs)
    diff = points.data[idx] - obs
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    n = len(obs)

    def backward(g):
        unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
        gp = np.zeros_like(points.data)
        np.add.at(gp, idx, unit * (g / n))
        points._accumulate(gp)

    return _result(np.mean(dist), (points,), backward, "chamfer")


# parameters, optimiser, serialisation ----------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: Optional[dict],
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """In-place Adam over a list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = None

    def step(self):
        # same arithmetic as adam_step, but updating moments and parameters in place
        b1, b2 = self.betas
        if self.state is None:
            self.state = {"t": 0, "m": [np.zeros_like(p.data) for p in self.params],
                          "v": [np.zeros_like(p.data) for p in self.params]}
        t = self.state["t"] = self.state["t"] + 1
        c1, c2 = 1 - b1**t, 1 - b2**t
        for p, m, v in zip(self.params, self.state["m"], self.state["v"]):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            gg = (1 - b2) * g
            gg *= g
            v += gg
            denom = v / c2
            np.sqrt(denom, out=denom)
            denom += self.eps
            upd = m / c1
            upd *= self.lr
            upd /= denom
            p.data = p.data - upd

    def zero_grad(self):
        for p in self.params:
            p.grad = None


MAGIC = b"SCNN1"


def save_weights(path, params: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in params.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not an SCNN1 weight file")
    pos = len(MAGIC)
    out = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    return out
