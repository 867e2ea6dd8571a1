"""Dense tensors with reverse-mode differentiation.

This is a deliberately small engine: it supports exactly the operator set
the learned update unit needs (2-D convolution, transposed convolution,
batch normalization, ReLU, elementwise arithmetic, reductions, and custom
linear maps), nothing more.  The computation graph is recorded dynamically
on every forward pass, so the same code path serves a 5-step training
unroll and a 30-step inference run.

All convolutions are stride 1 and size preserving (symmetric zero padding
of (kernel_size - 1) / 2 per side).  Arrays are plain numpy; convolution is
lowered to im2col + GEMM so the heavy lifting happens inside BLAS.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """A tensor dimension does not match what an operation requires."""


_tls = threading.local()


class Tensor:
    """A node in the computation graph wrapping a numpy array.

    Leaf tensors are created directly; interior nodes are created by the
    operations in this module.  ``grad`` is populated by ``backward`` and
    accumulates additively until reset, so repeated backward passes sum
    their contributions.  Data is treated as immutable once the tensor has
    entered a graph (the training loop updates parameters only between
    graphs).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's data, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every upstream tensor.

        Rejects non-scalar roots.  Gradients add onto whatever is already
        stored in ``grad``; call ``zero_grad`` on parameters between steps.
        """
        if self.data.ndim != 0:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        _accumulate(self, np.ones((), dtype=self.data.dtype))
        for node in topo:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative so unroll depth is unbounded."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``fresh`` marks arrays the caller just allocated and will never touch
    again, letting the first accumulation adopt them without a copy.
    Anything pooled, viewed, or shared must be passed with fresh=False.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (forward-only inference)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------
# elementwise ops and reductions
# ---------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g, fresh=True)

    return _node(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_shape("mul", a, b)

    def backward(g):
        _accumulate(a, g * b.data, fresh=True)
        _accumulate(b, g * a.data, fresh=True)

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c, fresh=True)

    return _node(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(v, 0); the subgradient at exactly 0 is taken as 0."""
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (out_data > 0), fresh=True)

    return _node(out_data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * np.sign(a.data), fresh=True)

    return _node(np.abs(a.data), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def hdiff(a: Tensor) -> Tensor:
    """Forward differences along width; output is one column narrower."""
    if a.data.ndim != 4 or a.data.shape[3] < 2:
        raise ShapeError(f"hdiff needs rank-4 input with width >= 2, got {a.data.shape}")

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[:, :, :, 1:] += g
        gx[:, :, :, :-1] -= g
        _accumulate(a, gx, fresh=True)

    return _node(a.data[:, :, :, 1:] - a.data[:, :, :, :-1], (a,), backward)


def vdiff(a: Tensor) -> Tensor:
    """Forward differences along height; output is one row shorter."""
    if a.data.ndim != 4 or a.data.shape[2] < 2:
        raise ShapeError(f"vdiff needs rank-4 input with height >= 2, got {a.data.shape}")

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[:, :, 1:, :] += g
        gx[:, :, :-1, :] -= g
        _accumulate(a, gx, fresh=True)

    return _node(a.data[:, :, 1:, :] - a.data[:, :, :-1, :], (a,), backward)


def linear_map(x: Tensor, forward_fn, adjoint_fn) -> Tensor:
    """Apply a fixed (non-trainable) linear operator inside the graph.

    ``forward_fn`` and ``adjoint_fn`` act on raw arrays and must be exact
    adjoints of one another; the backward pass is simply the adjoint.
    """

    def backward(g):
        _accumulate(x, adjoint_fn(g), fresh=True)

    return _node(forward_fn(x.data), (x,), backward)


# ---------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for a convolution.

    ``out_channels``/``in_channels`` always describe the underlying forward
    convolution, whose weights have shape (out, in, k, k).  With
    ``transposed`` set, the operation is the adjoint of that convolution:
    it consumes ``out_channels``-channel input and produces
    ``in_channels``-channel output using the same weight layout.

    Stride is fixed at 1 and padding defaults to (k - 1) / 2 per side so
    spatial size is always preserved.
    """

    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | None = None
    transposed: bool = False

    def __post_init__(self):
        if self.stride != 1:
            raise ValueError(f"only stride 1 is supported, got {self.stride}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding is None else self.padding


# Scratch buffers for convolution lowering.  Fresh multi-megabyte
# allocations page-fault on every call, which dominated profiles; reusing
# warm buffers is several times faster.  Buffers never escape an
# operation: everything stored on the graph is freshly allocated or
# copied.  The pool is thread-local so frozen-parameter inference may run
# in parallel threads.
def _buf(tag: str, shape: tuple[int, ...], dtype) -> np.ndarray:
    pool = getattr(_tls, "pool", None)
    if pool is None:
        pool = _tls.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype=dtype)
    return buf


def _acquire(shape: tuple[int, ...], dtype) -> np.ndarray:
    """Take a buffer whose lifetime outlives one op call (freelist, not
    pool): used for patch columns kept from forward until backward."""
    fl = getattr(_tls, "freelist", None)
    if fl is None:
        fl = _tls.freelist = {}
    key = (shape, np.dtype(dtype).str)
    stack = fl.get(key)
    if stack:
        return stack.pop()
    return np.empty(shape, dtype=dtype)


def _release(arr: np.ndarray) -> None:
    fl = getattr(_tls, "freelist", None)
    if fl is None:
        fl = _tls.freelist = {}
    fl.setdefault((arr.shape, arr.dtype.str), []).append(arr)


def _im2col(x: np.ndarray, k: int, pad: int, cols: np.ndarray) -> tuple[int, int]:
    """Unfold (B, C, H, W) into (C*k*k, B*Ho*Wo) patch columns in ``cols``.

    The input is transposed to channel-first once so the per-tap copies
    below are plain strided block copies, which is far cheaper than a
    single gather across six permuted axes.
    """
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    xt = _buf("im2col.xt", (c, b, h + 2 * pad, w + 2 * pad), x.dtype)
    np.copyto(xt, x.transpose(1, 0, 2, 3))
    cols6 = cols.reshape(c, k, k, b, ho, wo)
    for di in range(k):
        for dj in range(k):
            np.copyto(cols6[:, di, dj], xt[:, :, di : di + ho, dj : dj + wo])
    return ho, wo


def _scatter_taps(w4: np.ndarray, src_mat: np.ndarray, b: int, h: int, w: int, pad: int) -> np.ndarray:
    """Accumulate W[o,c,u,v]^T src over taps into a (B, C, H, W) image.

    This is the transposed-convolution core (equivalently col2im of
    W^T src) fused so the k*k*C-row column matrix is never materialized.
    Returns a transposed view of a pooled accumulator; copy before the
    next pooled op.
    """
    o, c, k, _ = w4.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = hp - k + 1
    wo = wp - k + 1
    acc = _buf("scatter.acc", (c, b, hp, wp), src_mat.dtype)
    acc[:] = 0
    tmp = _buf("scatter.tmp", (c, b * ho * wo), src_mat.dtype)
    tmp4 = tmp.reshape(c, b, ho, wo)
    # tap-major contiguous weights keep matmul on the BLAS path
    wt = _buf("scatter.w", (k, k, c, o), w4.dtype)
    np.copyto(wt, w4.transpose(2, 3, 1, 0))
    for di in range(k):
        for dj in range(k):
            np.matmul(wt[di, dj], src_mat, out=tmp)
            acc[:, :, di : di + ho, dj : dj + wo] += tmp4
    if pad:
        acc = acc[:, :, pad : pad + h, pad : pad + w]
    return acc.transpose(1, 0, 2, 3)


def _check_conv_shapes(op: str, x: Tensor, w: Tensor, spec: ConvSpec, transposed: bool) -> None:
    k = spec.kernel_size
    expect_w = (spec.out_channels, spec.in_channels, k, k)
    if w.data.shape != expect_w:
        raise ShapeError(f"{op}: weight shape {w.data.shape} != {expect_w} required by spec")
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: input must be rank 4 (B, C, H, W), got {x.data.shape}")
    expect_c = spec.out_channels if transposed else spec.in_channels
    if x.data.shape[1] != expect_c:
        raise ShapeError(f"{op}: input channel count {x.data.shape[1]} != {expect_c}")


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, linear in both input and weights.

    Output spatial size equals input spatial size under the default
    padding.  ``bias``, when given, is one value per output channel.
    """
    if spec.transposed:
        raise ValueError("conv2d called with a transposed ConvSpec; use tconv2d")
    _check_conv_shapes("conv2d", x, w, spec, transposed=False)

    b, c, h, wd = x.data.shape
    o, _, k, _ = w.data.shape
    pad = spec.pad
    needs_grad = w.requires_grad or x.requires_grad or (bias is not None and bias.requires_grad)
    # columns survive until backward (for the weight gradient), so they
    # come from the freelist rather than the single-use pool
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    cols = _acquire((c * k * k, b * ho * wo), x.data.dtype)
    _im2col(x.data, k, pad, cols)
    out_mat = _buf("omat", (o, b * ho * wo), x.data.dtype)
    np.matmul(w.data.reshape(o, c * k * k), cols, out=out_mat)
    # .copy() is load-bearing: the node must own its data, never the pool
    out = out_mat.reshape(o, b, ho, wo).transpose(1, 0, 2, 3).copy()
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    if not (needs_grad and w.requires_grad):
        _release(cols)
        cols = None

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        nonlocal cols
        g_mat = _buf("gmat", (o, b * ho * wo), g.dtype)
        np.copyto(g_mat.reshape(o, b, ho, wo), g.transpose(1, 0, 2, 3))
        if w.requires_grad:
            cols_w = cols
            if cols_w is None:  # repeated backward after the columns were released
                cols_w = _acquire((c * k * k, b * ho * wo), x.data.dtype)
                _im2col(x.data, k, pad, cols_w)
            _accumulate(w, np.matmul(g_mat, cols_w.T).reshape(w.data.shape), fresh=True)
            _release(cols_w)
            cols = None
        if x.requires_grad:
            _accumulate(x, _scatter_taps(w.data, g_mat, b, h, wd, pad))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)), fresh=True)

    return _node(out, parents, backward)


def tconv2d(x: Tensor, w: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution: the exact linear adjoint of conv2d.

    For any compatible x, y and shared weights W,
    <conv2d(x, W), y> == <x, tconv2d(y, W)>.
    """
    if not spec.transposed:
        raise ValueError("tconv2d called with a non-transposed ConvSpec; use conv2d")
    _check_conv_shapes("tconv2d", x, w, spec, transposed=True)

    b, o, h, wd = x.data.shape
    _, c, k, _ = w.data.shape
    pad = spec.pad
    x_mat = _buf("omat", (o, b * h * wd), x.data.dtype)
    np.copyto(x_mat.reshape(o, b, h, wd), x.data.transpose(1, 0, 2, 3))
    out = _scatter_taps(w.data, x_mat, b, h, wd, pad).copy()  # owns its data
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if w.requires_grad or x.requires_grad:
            cols_g = _acquire((c * k * k, b * h * wd), g.dtype)
            ho, wo = _im2col(g, k, pad, cols_g)
        if w.requires_grad:
            x_mat_b = _buf("omat", (o, b * h * wd), x.data.dtype)
            np.copyto(x_mat_b.reshape(o, b, h, wd), x.data.transpose(1, 0, 2, 3))
            _accumulate(w, np.matmul(x_mat_b, cols_g.T).reshape(w.data.shape), fresh=True)
        if x.requires_grad:
            gx_mat = _buf("gmat", (o, b * ho * wo), g.dtype)
            np.matmul(w.data.reshape(o, c * k * k), cols_g, out=gx_mat)
            _accumulate(x, gx_mat.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))
        if w.requires_grad or x.requires_grad:
            _release(cols_g)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)), fresh=True)

    return _node(out, parents, backward)


# ---------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Trainable scale/shift plus running statistics for one BN layer.

    In train mode the forward pass normalizes by per-channel batch
    statistics and updates the running statistics by exponential moving
    average; in eval mode it is a fixed affine map given the frozen
    running statistics.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1,
               epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: input must be rank 4, got {x.data.shape}")
    c = x.data.shape[1]
    if state.gamma.data.shape != (c,):
        raise ShapeError(
            f"batch_norm: channel count {c} != state channels {state.gamma.data.shape[0]}"
        )
    b, _, h, w = x.data.shape
    m = b * h * w
    if m == 0:
        raise ShapeError("batch_norm: zero batch x spatial extent")

    eps = state.epsilon
    gamma, beta = state.gamma, state.beta

    if state.mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean *= 1.0 - mom
        state.running_mean += mom * mu
        state.running_var *= 1.0 - mom
        state.running_var += mom * var
    elif state.mode == "eval":
        mu = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"batch_norm: unknown mode {state.mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    train_mode = state.mode == "train"

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)), fresh=True)
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)), fresh=True)
        if x.requires_grad:
            gs = gamma.data.reshape(1, c, 1, 1) * inv_std.reshape(1, c, 1, 1)
            if train_mode:
                g_mean = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx_mean = (g * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                _accumulate(x, gs * (g - g_mean - xhat * gx_mean), fresh=True)
            else:
                _accumulate(x, gs * g, fresh=True)

    return _node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------


def finite_diff_check(f, point: Tensor, step: float, coords=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar Tensor and must be deterministic.
    The error at each coordinate is |analytic - central| / (|analytic| +
    |central| + tiny).  By default every coordinate is probed; for large
    points pass ``coords`` (a count, drawn with ``rng``) to probe a random
    subset.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = Tensor(np.array(point.data, copy=True), requires_grad=True)
    loss = f(p)
    loss.backward()
    analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)

    n = p.data.size
    if coords is None:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(n, size=min(int(coords), n), replace=False)

    flat = p.data.reshape(-1)
    tiny = 1e-12
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(p.data)).data)
        flat[i] = orig - step
        lo = float(f(Tensor(p.data)).data)
        flat[i] = orig
        central = (hi - lo) / (2.0 * step)
        err = abs(float(analytic[i]) - central) / (abs(float(analytic[i])) + abs(central) + tiny)
        worst = max(worst, err)
    return worst
