"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The op set is exactly what a small image classifier needs: matmul/linear,
im2col convolution, batchnorm, relu, add, global average pooling and softmax
cross-entropy. Everything computes in float64 so central-difference gradient
checks at step 1e-3 stay below 1e-4 relative error.

Ops record onto the innermost active ``Tape`` (a context manager) whenever any
input requires gradients. ``backward(loss, tape)`` walks the tape once in
reverse; execution order is already topological, so no sorting is needed.
Running ops with no tape active is a plain forward pass and saves nothing.

Set FIXEDHEAD_DEBUG=1 to assert that every forward result is finite.
"""

import os
import threading

import numpy as np

from . import kernels
from .errors import (
    ContractError,
    DegenerateStatisticsError,
    LabelError,
    ShapeError,
)
from .rng import Rng

_CHECK_FINITE = os.environ.get("FIXEDHEAD_DEBUG", "0") not in ("", "0")


class Tensor:
    """N-dimensional float64 array with an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class Parameter:
    """A model weight: value tensor, trainable flag, lazy momentum buffer.

    Non-trainable parameters are never touched by the optimizer; their value
    must be bit-identical before and after any number of steps.
    """

    __slots__ = ("value", "trainable", "momentum_buffer")

    def __init__(self, value, trainable: bool = True):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = bool(trainable)
        self.trainable = bool(trainable)
        self.momentum_buffer = None

    def __repr__(self):
        return f"Parameter(shape={tuple(self.value.shape)}, trainable={self.trainable})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


class Tape:
    """Append-only op record; entering makes it the active recording target."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(op, inputs, out_data, backward_fn):
    """Wrap a forward result; record a node when grads are needed."""
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise ContractError(f"{op}: non-finite values in forward output")
    tape = _active_tape()
    if tape is not None and req:
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss.

    Gradients accumulate additively across fan-out; the tape is walked exactly
    once in reverse execution order.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, grads):
            if isinstance(t, Tensor) and t.requires_grad and g is not None:
                t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# construction


def randn(shape, rng: Rng) -> Tensor:
    """Standard-normal tensor; the stream is fully determined by rng's seed."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: dims must all be >= 1")
    return Tensor(rng.standard_normal(shape))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")

    def bwd(dy):
        da = dy @ b.data.T if a.requires_grad else None
        db = a.data.T @ dy if b.requires_grad else None
        return da, db

    return _make("matmul", (a, b), a.data @ b.data, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b). x: (N, n_in), w: (n_out, n_in), b: (n_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data

    def bwd(dy):
        dx = dy @ w.data if x.requires_grad else None
        dw = dy.T @ x.data if w.requires_grad else None
        db = dy.sum(axis=0) if b is not None and b.requires_grad else None
        return dx, dw, db

    return _make("linear", (x, w, b), out, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-K bias to every row of an (N, K) tensor."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add shapes: x {x.shape}, b {b.shape}")

    def bwd(dy):
        return (dy if x.requires_grad else None,
                dy.sum(axis=0) if b.requires_grad else None)

    return _make("bias_add", (x, b), x.data + b.data, bwd)


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply by a scalar tensor (used for the learned head scale)."""
    if alpha.data.size != 1:
        raise ShapeError("scale factor must be a scalar tensor")

    def bwd(dy):
        dx = alpha.data.reshape(()) * dy if x.requires_grad else None
        da = np.sum(dy * x.data).reshape(alpha.shape) if alpha.requires_grad else None
        return dx, da

    return _make("scale", (x, alpha), alpha.data.reshape(()) * x.data, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(dy):
        return (dy if a.requires_grad else None, dy if b.requires_grad else None)

    return _make("add", (a, b), a.data + b.data, bwd)


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    def bwd(dy):
        return (dy * (x.data > 0),)

    return _make("relu", (x,), np.maximum(x.data, 0.0), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bwd(dy):
        return (np.broadcast_to(dy, x.shape).copy(),)

    return _make("sum", (x,), x.data.sum(), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d convolution via im2col + matmul.

    x: (N, Cin, H, W), w: (Cout, Cin/groups, kh, kw), bias: (Cout,).
    Output spatial dims: H' = (H + 2*padding - kh)//stride + 1, same for W'.
    Groups operate on disjoint channel blocks, so a depthwise convolution
    (groups == Cin == Cout) makes output channel c depend on input channel c
    only.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    n, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError("conv2d needs stride >= 1, padding >= 0, groups >= 1")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"weight expects {c_in_g} in-channels per group, input has {c_in // groups}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")

    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    cog = c_out // groups
    cig = c_in // groups

    if padding:
        xp = np.zeros((n, c_in, hp, wp), dtype=np.float64)
        xp[:, :, padding : padding + h, padding : padding + wd] = x.data
    else:
        xp = x.data

    y = np.empty((n, c_out, out_h * out_w), dtype=np.float64)
    cols_per_group = []
    for g in range(groups):
        cols = kernels.im2col(xp[:, g * cig : (g + 1) * cig], kh, kw, stride, out_h, out_w)
        cols_per_group.append(cols)
        w_mat = w.data[g * cog : (g + 1) * cog].reshape(cog, cig * kh * kw)
        y[:, g * cog : (g + 1) * cog] = w_mat @ cols
    y = y.reshape(n, c_out, out_h, out_w)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def bwd(dy):
        dyf = dy.reshape(n, c_out, out_h * out_w)
        dx = None
        if x.requires_grad:
            dxp = np.empty((n, c_in, hp, wp), dtype=np.float64)
            for g in range(groups):
                w_mat = w.data[g * cog : (g + 1) * cog].reshape(cog, cig * kh * kw)
                dcols = w_mat.T @ dyf[:, g * cog : (g + 1) * cog]
                dxp[:, g * cig : (g + 1) * cig] = kernels.col2im(
                    dcols, kh, kw, stride, out_h, out_w, (n, cig, hp, wp)
                )
            dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        dw = None
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for g in range(groups):
                dy_g = dyf[:, g * cog : (g + 1) * cog]
                # (cog, N*L) @ (N*L, cig*kh*kw)
                dy2 = dy_g.transpose(1, 0, 2).reshape(cog, -1)
                cols2 = cols_per_group[g].transpose(1, 0, 2).reshape(cig * kh * kw, -1)
                dw[g * cog : (g + 1) * cog] = (dy2 @ cols2.T).reshape(cog, cig, kh, kw)
        db = dyf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    return _make("conv2d", (x, w, bias), y, bwd)


# ---------------------------------------------------------------------------
# normalization / pooling / loss


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batchnorm over (N, H, W).

    Train mode normalizes by biased batch statistics and folds them into the
    running estimates (running_var with the unbiased correction, matching the
    reference CNN implementations this mirrors); infer mode normalizes by the
    running estimates. Both modes are differentiable w.r.t. x, gamma, beta.
    """
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d expects (N, C, H, W) input")
    n, c, h, wd = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    m = n * h * wd
    if train:
        if m < 2:
            raise DegenerateStatisticsError(
                "train-mode batchnorm needs at least 2 elements per channel"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mean = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(dy):
        dgamma = (dy * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = dy.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = dy * gamma.data[None, :, None, None]
            if train:
                dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv**3
                dmean = -(dxhat.sum(axis=(0, 2, 3)) * inv) + dvar * (
                    -2.0 / m
                ) * xc.sum(axis=(0, 2, 3))
                dx = (
                    dxhat * inv[None, :, None, None]
                    + (2.0 / m) * dvar[None, :, None, None] * xc
                    + dmean[None, :, None, None] / m
                )
            else:
                dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _make("batchnorm2d", (x, gamma, beta), y, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool expects (N, C, H, W) input")
    n, c, h, w = x.shape
    y = x.data.reshape(n, c, h * w).mean(axis=2)

    def bwd(dy):
        g = np.broadcast_to(dy[:, :, None, None] / (h * w), x.shape).copy()
        return (g,)

    return _make("global_avg_pool", (x,), y, bwd)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Stabilized by per-row max subtraction; gradient is (softmax - onehot)/N.
    """
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (N, K) logits")
    t = np.asarray(targets)
    n, k = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise LabelError(f"targets must lie in [0, {k})")
    t = t.astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), t].mean()
    probs = np.exp(logp)

    def bwd(dy):
        g = probs.copy()
        g[np.arange(n), t] -= 1.0
        g *= float(dy) / n
        return (g, None)

    return _make("softmax_cross_entropy", (logits, None), loss, bwd)


# ---------------------------------------------------------------------------
# optimization / verification


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update: v <- momentum*v + grad + wd*value; value <- value - lr*v.

    Non-trainable parameters are left untouched. All gradients (including
    those of non-trainable parameters, if any were set) are cleared at the end.
    """
    for p in params:
        if p.trainable:
            g = p.value.grad
            if g is None:
                raise ContractError("trainable parameter has no gradient")
            v = g + weight_decay * p.value.data
            if momentum != 0.0:
                if p.momentum_buffer is None:
                    p.momentum_buffer = np.zeros_like(p.value.data)
                p.momentum_buffer *= momentum
                p.momentum_buffer += v
                v = p.momentum_buffer
            p.value.data -= lr * v
        p.value.zero_grad()


def finite_diff_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences.

    f maps a tensor to a scalar tensor and must be deterministic. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    x.zero_grad()
    x.requires_grad = True
    with Tape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check needs a scalar-valued function")
    if out._tape is tape:
        backward(out, tape)
    # if f never touched x, the output was not recorded and the gradient is zero
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel().copy()

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(x).data)
        flat[i] = orig - step
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    if flat.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
