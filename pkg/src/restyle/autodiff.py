"""Minimal reverse-mode differentiable tensor engine.

Layout conventions: feature maps are (C, H, W) row-major with the channel
axis first, matrices are (rows, cols), scalars have shape (). Storage is
float32 by default; every op preserves the dtype of its inputs, so a whole
computation can be shadowed in float64 for numerical verification.

The graph is built eagerly: each op returns a Tensor that remembers its
parents and a closure that scatters the output gradient back to them.
Closures are only recorded when some input actually requires a gradient,
so purely inference-side computation carries no bookkeeping cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense N-d float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def record(data, parents, backward):
    """Assemble an op result node.

    `backward` receives the output gradient and must scatter it to the
    parents via `accumulate`. It is dropped when no parent needs it.
    """
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def accumulate(t, g):
    """Add `g` into t.grad, allocating on first touch."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Backpropagate from a scalar loss.

    Fills `.grad` on every tensor with requires_grad reachable from `loss`.
    Repeated calls without clearing grads accumulate, one unit of gradient
    per call: pre-existing grads are set aside during the pass and added
    back afterwards so they do not feed into this pass's propagation.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    saved = [node.grad for node in topo]
    for node in topo:
        node.grad = None
    accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node, prior in zip(topo, saved):
        if prior is not None:
            node.grad = prior if node.grad is None else node.grad + prior


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    _check_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, -g)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return record(a.data * b.data, (a, b), bw)


def scale(a, s):
    s = float(s)

    def bw(g):
        if a.requires_grad:
            accumulate(a, g * s)

    return record(a.data * a.dtype.type(s), (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            accumulate(a, g * mask)

    return record(np.where(mask, a.data, a.dtype.type(0)), (a,), bw)


def clamp01(a):
    """Clamp to [0,1]; gradient passes through the closed interval."""
    mask = (a.data >= 0) & (a.data <= 1)

    def bw(g):
        if a.requires_grad:
            accumulate(a, g * mask)

    return record(np.clip(a.data, 0, 1), (a,), bw)


def sum_all(a):
    def bw(g):
        if a.requires_grad:
            accumulate(a, np.full_like(a.data, g))

    return record(a.data.sum(dtype=a.dtype), (a,), bw)


def mean_all(a):
    inv = 1.0 / a.data.size

    def bw(g):
        if a.requires_grad:
            accumulate(a, np.full_like(a.data, g * a.dtype.type(inv)))

    return record(a.data.mean(dtype=a.dtype), (a,), bw)


# ---------------------------------------------------------------------------
# spatial ops on (C, H, W) maps

def _check_chw(a, op):
    if a.data.ndim != 3:
        raise ContractError(f"{op}: expected a (C,H,W) tensor, got shape {a.shape}")


def avgpool2x(a):
    """2x2 average pooling; halves H and W."""
    _check_chw(a, "avgpool2x")
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise ContractError(f"avgpool2x: H and W must be even, got {h}x{w}")
    out = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4), dtype=a.dtype)

    def bw(g):
        if a.requires_grad:
            gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * a.dtype.type(0.25)
            accumulate(a, gx)

    return record(out, (a,), bw)


def upsample_nearest2x(a):
    """Nearest-neighbor upsampling; doubles H and W."""
    _check_chw(a, "upsample_nearest2x")
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def bw(g):
        if a.requires_grad:
            accumulate(a, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return record(out, (a,), bw)


def concat_channels(xs):
    """Concatenate (C_i, H, W) maps along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ContractError("concat_channels: empty input list")
    for x in xs:
        _check_chw(x, "concat_channels")
        if x.shape[1:] != xs[0].shape[1:]:
            raise ContractError(
                f"concat_channels: spatial mismatch {x.shape[1:]} vs {xs[0].shape[1:]}")
    offsets = np.cumsum([0] + [x.shape[0] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                accumulate(x, g[lo:hi])

    return record(np.concatenate([x.data for x in xs], axis=0), xs, bw)


# ---------------------------------------------------------------------------
# matrix ops

def _check_2d(a, op):
    if a.data.ndim != 2:
        raise ContractError(f"{op}: expected a 2-d tensor, got shape {a.shape}")


def matmul(a, b):
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return record(a.data @ b.data, (a, b), bw)


def transpose2d(a):
    _check_2d(a, "transpose2d")

    def bw(g):
        if a.requires_grad:
            accumulate(a, np.ascontiguousarray(g.T))

    return record(np.ascontiguousarray(a.data.T), (a,), bw)


def softmax_rows(a):
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    _check_2d(a, "softmax_rows")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            accumulate(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return record(y, (a,), bw)


def flatten_pixels(a):
    """(C, H, W) -> (H*W, C), pixels as rows in row-major order."""
    _check_chw(a, "flatten_pixels")
    c, h, w = a.shape

    def bw(g):
        if a.requires_grad:
            accumulate(a, np.ascontiguousarray(g.T).reshape(c, h, w))

    return record(np.ascontiguousarray(a.data.reshape(c, h * w).T), (a,), bw)


def unflatten_pixels(a, h, w):
    """(H*W, C) -> (C, H, W); inverse of flatten_pixels."""
    _check_2d(a, "unflatten_pixels")
    n, c = a.shape
    if n != h * w:
        raise ContractError(f"unflatten_pixels: {n} rows cannot fill {h}x{w}")

    def bw(g):
        if a.requires_grad:
            accumulate(a, np.ascontiguousarray(g.reshape(c, h * w).T))

    return record(np.ascontiguousarray(a.data.T).reshape(c, h, w), (a,), bw)


def gram(f):
    """Channel Gram matrix G = F F^T / (C*H*W) of a (C, H, W) map."""
    _check_chw(f, "gram")
    c, h, w = f.shape
    flat = f.data.reshape(c, h * w)
    inv = f.dtype.type(1.0 / (c * h * w))
    out = (flat @ flat.T) * inv

    def bw(g):
        if f.requires_grad:
            accumulate(f, (((g + g.T) * inv) @ flat).reshape(c, h, w))

    return record(out, (f,), bw)


# ---------------------------------------------------------------------------
# convolution

@dataclass
class ConvParams:
    """2-d convolution parameters: weight (C_out, C_in, k, k), optional bias."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight
        if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ContractError(f"ConvParams: weight must be (C_out, C_in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise ContractError(f"ConvParams: kernel size {w.shape[2]} not supported")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ContractError(f"ConvParams: bias shape {self.bias.shape} != ({w.shape[0]},)")
        if self.stride < 1:
            raise ContractError("ConvParams: stride must be positive")
        if self.padding < 0:
            raise ContractError("ConvParams: padding must be non-negative")

    @property
    def kernel(self):
        return self.weight.shape[2]

    def tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def _im2col(xp, k, stride, ho, wo):
    c = xp.shape[0]
    col = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            col[:, ky, kx] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return col.reshape(c * k * k, ho * wo)


def conv2d(x, p):
    """2-d convolution (cross-correlation) of a (C, H, W) map."""
    _check_chw(x, "conv2d")
    weight, bias, stride, pad = p.weight, p.bias, p.stride, p.padding
    c_out, c_in, k, _ = weight.shape
    c, h, w = x.shape
    if c != c_in:
        raise ContractError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ContractError(f"conv2d: padded input {h}x{w} (pad {pad}) smaller than kernel {k}")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ContractError(f"conv2d: non-integer output size for input {h}x{w}, "
                            f"k={k}, stride={stride}, pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = w2 @ col
    if bias is not None:
        out = out + bias.data[:, None]
    # col is only needed again for the weight gradient
    saved_col = col if weight.requires_grad else None

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        if weight.requires_grad:
            accumulate(weight, (g2 @ saved_col.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcol = (w2.T @ g2).reshape(c_in, k, k, ho, wo)
            dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcol[:, ky, kx]
            accumulate(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(np.ascontiguousarray(out.reshape(c_out, ho, wo)), parents, bw)


# ---------------------------------------------------------------------------
# parameter initialization

def orthogonal_matrix(rng, rows, cols, dtype=DEFAULT_DTYPE):
    """Orthogonal(-ish) rows: QR of a Gaussian draw, sign-fixed for determinism."""
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0, 1.0, -1.0)
    if rows < cols:
        q = q.T
    return q[:rows, :cols].astype(dtype)


def conv_weight(rng, c_out, c_in, k, gain, dtype=DEFAULT_DTYPE):
    """Variance-preserving conv weight: orthogonal rows scaled by gain/sqrt(fan_in)."""
    fan_in = c_in * k * k
    w = orthogonal_matrix(rng, c_out, fan_in, dtype=dtype)
    # QR columns are unit-norm; rescale so each filter has norm gain
    return Tensor((w * gain).reshape(c_out, c_in, k, k).astype(dtype))
