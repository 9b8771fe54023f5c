"""Dense real tensors with a minimal reverse-mode differentiation engine.

The op set is exactly what the denoising network and the guidance gradients
need: broadcasted elementwise arithmetic, a handful of nonlinearities,
reductions, shape moves, dense/linear maps, a frame-local 3x3 spatial
convolution, softmax attention (with optional additive logit bias and an
identity-mask escape hatch), per-frame group normalization, and 2x spatial
resampling.

Tensors are immutable values once created; every op is a pure function that
returns a fresh Tensor. When any input requires a gradient the output
records its parents and a backward closure, forming an implicit acyclic
graph. `backward` walks that graph in reverse topological order and
accumulates gradients additively over fan-out.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "sigmoid", "silu", "tanh",
    "tsum", "tmean", "reshape", "transpose", "concat",
    "take_axis0", "repeat_axis0", "linear",
    "conv_spatial", "attention", "norm_group",
    "upsample_nearest2x", "downsample_avg2x", "rel_position_bias",
    "backward", "gradient_map",
]

_FLOATS = (np.float32, np.float64)


class Tensor:
    """A contiguous row-major real array, optionally part of a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # operator sugar; scalars keep the tensor's dtype
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

    def backward(self, output_grad=None):
        backward(self, output_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.flags.owndata else g.copy()
    else:
        t.grad = t.grad + g


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Invert numpy broadcasting: reduce g down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic with broadcasting

def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        _accum(a, _sum_to(da(g, a.data, b.data), a.shape))
        _accum(b, _sum_to(db(g, a.data, b.data), b.shape))

    return _node(out, (a, b), bw)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    eps = np.finfo(b.dtype).eps
    if np.any(np.abs(b.data) < eps):
        raise DomainError("division by value smaller than dtype epsilon")
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def neg(a):
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * out))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    return _node(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt requires non-negative input")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: _accum(a, g * (0.5 / np.maximum(out, np.finfo(out.dtype).tiny))))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free split form
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: _accum(a, g * s * (1.0 - s)))


def silu(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _node(a.data * s, (a,), lambda g: _accum(a, g * (s * (1.0 + a.data * (1.0 - s)))))


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: _accum(a, g * (1.0 - t * t)))


# ---------------------------------------------------------------------------
# reductions and shape moves

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return _node(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bw(g):
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return _node(np.asarray(out), (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: _accum(a, np.ascontiguousarray(g.transpose(inv))))


def concat(tensors: Iterable[Tensor], axis: int = -1):
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _node(out, ts, bw)


def take_axis0(a, indices):
    """Gather rows/frames along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_axis0 expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("take_axis0 index out of range")
    out = a.data[idx]

    def bw(g):
        acc = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return _node(out, (a,), bw)


def repeat_axis0(a, reps: int):
    """Repeat each leading-axis entry `reps` times (row0,row0,...,row1,...)."""
    a = _as_tensor(a)
    out = np.repeat(a.data, reps, axis=0)

    def bw(g):
        _accum(a, g.reshape((a.shape[0], reps) + a.shape[1:]).sum(axis=1))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# dense map

def linear(x, w, b=None):
    """y[..., n] = sum_k x[..., k] * w[k, n] (+ b[n])."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y2 = y2 + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(x, (g2 @ w.data.T).reshape(x.shape))
        _accum(w, x2.T @ g2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _node(y2.reshape(lead + (w.shape[1],)), parents, bw)


# ---------------------------------------------------------------------------
# spatial 3x3 convolution (frame axis is pure batch, zero "same" padding)

def conv_spatial(x, kernel, bias=None, stride: int = 1):
    """3x3 convolution over the two spatial axes of [F, H, W, Cin].

    The frame axis is never convolved: output[f] depends only on input[f].
    Zero padding of one pixel keeps H, W with stride 1; stride 2 halves them
    (H and W must then be even).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv_spatial expects x[F,H,W,Cin] and kernel[3,3,Cin,Cout]")
    kh, kw, cin_k, cout = kernel.shape
    if (kh, kw) != (3, 3):
        raise ShapeError("conv_spatial kernel must be 3x3")
    f, h, w, cin = x.shape
    if cin != cin_k:
        raise ShapeError(f"conv_spatial channel mismatch: input {cin} vs kernel {cin_k}")
    if stride not in (1, 2):
        raise ConfigError("conv_spatial stride must be 1 or 2")
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError("stride-2 conv_spatial requires even H and W")
    ho, wo = (h, w) if stride == 1 else (h // 2, w // 2)

    xp = np.zeros((f, h + 2, w + 2, cin), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    if stride == 2:
        win = win[:, ::2, ::2]
    # win: [F, Ho, Wo, Cin, 3, 3] -> patches [N, 3*3*Cin] matching kernel layout
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, 9 * cin)
    k2 = kernel.data.reshape(9 * cin, cout)
    y2 = patches @ k2
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv_spatial bias must have shape [Cout]")
        y2 = y2 + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        _accum(kernel, (patches.T @ g2).reshape(kernel.shape))
        if bias is not None:
            _accum(bias, g2.sum(axis=0))
        dpatch = (g2 @ k2.T).reshape(f, ho, wo, 3, 3, cin)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dpatch[:, :, :, i, j, :]
        _accum(x, np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :]))

    return _node(y2.reshape(f, ho, wo, cout), parents, bw)


# ---------------------------------------------------------------------------
# softmax attention

def attention(q, k, v, logit_bias=None, identity_mask: bool = False):
    """Scaled dot-product attention over [B, L, D].

    softmax is taken over the key axis of q.kT/sqrt(D) + logit_bias. The
    bias may be [L, L] (shared over batch) or [B, L, L]; -inf entries
    disallow a pairing exactly. With identity_mask the attention matrix is
    replaced by the identity, so the output is the value input bit-for-bit.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.ndim == k.ndim == v.ndim == 3):
        raise ShapeError("attention expects rank-3 [B, L, D] inputs")
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    b, l, d = q.shape

    if identity_mask:
        out = v.data.copy()
        return _node(out, (q, k, v), lambda g: _accum(v, g))

    scale = 1.0 / math.sqrt(d)
    logits = (q.data @ k.data.transpose(0, 2, 1)) * scale
    if logit_bias is not None:
        logit_bias = _as_tensor(logit_bias)
        if logit_bias.shape not in ((l, l), (b, l, l)):
            raise ShapeError(f"logit_bias shape {logit_bias.shape} does not match sequence length {l}")
        logits = logits + logit_bias.data
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    weights = e / e.sum(axis=-1, keepdims=True)
    out = weights @ v.data
    parents = [q, k, v] + ([logit_bias] if logit_bias is not None else [])

    def bw(g):
        _accum(v, weights.transpose(0, 2, 1) @ g)
        dw = g @ v.data.transpose(0, 2, 1)
        dlogits = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
        _accum(q, (dlogits @ k.data) * scale)
        _accum(k, (dlogits.transpose(0, 2, 1) @ q.data) * scale)
        if logit_bias is not None:
            _accum(logit_bias, _sum_to(dlogits, logit_bias.shape))

    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# per-frame group normalization

def norm_group(x, groups: int, scale, shift, eps: float = 1e-5):
    """Group normalization of [F, H, W, C] with statistics per frame.

    Mean/variance are taken over (H, W, channels-within-group) for each
    frame independently, so image-masked frames stay independent. Constant
    input maps to `shift` (epsilon swallows the zero variance).
    """
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError("norm_group expects [F, H, W, C]")
    f, h, w, c = x.shape
    if c % groups:
        raise ConfigError(f"channels {c} not divisible by groups {groups}")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("scale/shift must have shape [C]")
    cg = c // groups
    xg = x.data.reshape(f, h, w, groups, cg)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(f, h, w, c)
    out = xhat * scale.data + shift.data
    n = h * w * cg

    def bw(g):
        _accum(scale, (g * xhat).sum(axis=(0, 1, 2)))
        _accum(shift, g.sum(axis=(0, 1, 2)))
        dxhat = (g * scale.data).reshape(f, h, w, groups, cg)
        s1 = dxhat.sum(axis=(1, 2, 4), keepdims=True)
        s2 = (dxhat * xc).sum(axis=(1, 2, 4), keepdims=True)
        dx = inv * (dxhat - s1 / n - xc * inv * inv * s2 / n)
        _accum(x, np.ascontiguousarray(dx.reshape(f, h, w, c)))

    return _node(out, (x, scale, shift), bw)


# ---------------------------------------------------------------------------
# 2x spatial resampling

def upsample_nearest2x(x):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x expects [F, H, W, C]")
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    f, h, w, c = x.shape

    def bw(g):
        _accum(x, g.reshape(f, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _node(out, (x,), bw)


def downsample_avg2x(x):
    """Factor-2 bilinear downsampling (each output pixel averages a 2x2 block)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("downsample_avg2x expects [F, H, W, C]")
    f, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("downsample_avg2x requires even H and W")
    out = x.data.reshape(f, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25)

    return _node(out, (x,), bw)


def rel_position_bias(table, length: int):
    """Expand a per-head offset table [H, 2*Fmax-1] into [H, L, L] logits.

    Entry (i, j) reads the table at offset j - i; the bias depends only on
    the offset, never on absolute frame index.
    """
    table = _as_tensor(table)
    if table.ndim != 2 or table.shape[1] % 2 == 0:
        raise ShapeError("rel_position_bias table must be [heads, 2*Fmax-1]")
    fmax = (table.shape[1] + 1) // 2
    if length > fmax:
        raise ShapeError(f"sequence length {length} exceeds table span {fmax}")
    offs = np.arange(length)[None, :] - np.arange(length)[:, None] + fmax - 1
    out = table.data[:, offs]
    heads = table.shape[0]

    def bw(g):
        acc = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(acc, (np.arange(heads)[:, None, None], offs[None]), g)
        _accum(table, acc)

    return _node(np.ascontiguousarray(out), (table,), bw)


# ---------------------------------------------------------------------------
# reverse pass

def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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


def backward(output: Tensor, output_grad=None) -> None:
    """Propagate gradients from `output` to every reachable leaf.

    Leaves created with requires_grad end up with `.grad` set; leaves the
    output does not depend on keep grad None (read as zero). The graph is
    single-use: run one backward per recorded forward.
    """
    if output_grad is None:
        g = np.ones(output.shape, dtype=output.dtype)
    else:
        g = np.asarray(output_grad, dtype=output.dtype)
        if g.shape != output.shape:
            raise ShapeError(f"output_grad shape {g.shape} != output shape {output.shape}")
    order = _topo(output)
    output.grad = g
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        if node is not output:
            node.grad = None  # free interior storage; leaves keep theirs


def gradient_map(output: Tensor, leaves: Sequence[Tensor], output_grad=None) -> dict[Tensor, np.ndarray]:
    """Run backward and return {leaf: gradient array} for the given leaves.

    Leaves not reached by the graph map to zero gradients.
    """
    backward(output, output_grad)
    return {
        leaf: (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape, dtype=leaf.dtype))
        for leaf in leaves
    }
