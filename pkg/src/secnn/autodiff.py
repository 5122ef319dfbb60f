"""Dense f32 tensors with reverse-mode automatic differentiation.

Every numeric operation the network needs lives here as a module-level
function that returns a new :class:`Tensor` wired into the compute graph.
Calling ``backward()`` on a scalar loss replays the recorded operations in
reverse topological order and accumulates gradients into every reachable
:class:`Parameter`.  Activations are laid out as (batch, channel, height,
width); all buffers are row-major float32.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class LabelError(ValueError):
    """A class label lies outside the valid range."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same graph root."""


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A node in the compute graph: an f32 array plus backward plumbing.

    ``_prev`` holds the inputs that require gradients; ``_backward`` is a
    closure that reads ``self.grad`` and accumulates into those inputs.
    Tensors are treated as immutable once an op has produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate gradients of this scalar w.r.t. every reachable input.

        Gradients accumulate; callers zero parameter grads between steps.
        Raises :class:`GraphConsumedError` on a second call through the
        same root.
        """
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError("backward() already ran on this graph")
        self._consumed = True

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable leaf tensor with a persistent, zeroed gradient."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _node(data, inputs):
    prev = tuple(t for t in inputs if isinstance(t, Tensor) and t.requires_grad)
    out = Tensor(data, requires_grad=bool(prev))
    out._prev = prev
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dim(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv/pool geometry invalid: size={size} k={k} stride={stride} padding={padding}"
        )
    return span // stride + 1


def _im2col(xp, k, stride, out_h, out_w):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(n, c * k * k, out_h * out_w)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,k,k) plus bias.

    Zero padding; no kernel flip.  The im2col buffer is rebuilt in the
    backward pass instead of being saved, trading a little time for a flat
    memory profile as the model grows.
    """
    n, cin, h, wdt = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"kernel must be square with odd size, got {w.shape}")
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    out_h = _conv_out_dim(h, k, stride, padding)
    out_w = _conv_out_dim(wdt, k, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    w2d = w.data.reshape(cout, cin * k * k)
    out_data = np.matmul(w2d, cols) + b.data[:, None]
    out = _node(out_data.reshape(n, cout, out_h, out_w), (x, w, b))

    def _backward():
        g = out.grad.reshape(n, cout, out_h * out_w)
        if padding:
            xpb = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        else:
            xpb = x.data
        cols_b = _im2col(xpb, k, stride, out_h, out_w)
        if w.requires_grad:
            dw = np.tensordot(g, cols_b, axes=([0, 2], [0, 2]))
            w._accumulate(dw.reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2d.T, g).reshape(n, cin, k, k, out_h, out_w)
            dxp = np.zeros_like(xpb)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, padding : padding + h, padding : padding + wdt] if padding else dxp)

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N,C,H,W).

    Train mode normalizes by batch statistics and updates the running
    buffers in place (unbiased variance for the running estimate, biased
    for the normalization itself).  Eval mode normalizes by the running
    buffers.  Differentiable w.r.t. x, gamma, beta in both modes.
    """
    n, c, h, wdt = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    axes = (0, 2, 3)
    if mode == "train":
        m = n * h * wdt
        if m < 2:
            raise ShapeError("train-mode batchnorm needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(np.float32)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    out = _node(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None], (x, gamma, beta))

    def _backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * wdt
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            x._accumulate(dx.astype(np.float32))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# activations and regularizers


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Elementwise max(x, slope*x); the subgradient at 0 is taken as 1."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    nonneg = x.data >= 0
    out = _node(np.where(nonneg, x.data, slope * x.data), (x,))

    def _backward():
        x._accumulate(np.where(nonneg, out.grad, slope * out.grad))

    out._backward = _backward
    return out


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Eval mode and rate 0 are exact identity (the input tensor is returned
    unchanged, no graph node added).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    out = _node(x.data * keep, (x,))

    def _backward():
        x._accumulate(out.grad * keep)

    out._backward = _backward
    return out


def l1_penalty(params, coefficient: float) -> Tensor:
    """coefficient * sum(|theta|) over all given parameters.

    Subgradient at 0 is 0 (np.sign semantics).
    """
    if coefficient < 0:
        raise ValueError("coefficient must be non-negative")
    params = tuple(params)
    total = sum(float(np.abs(p.data).sum()) for p in params)
    out = _node(np.float32(coefficient * total), params)

    def _backward():
        g = float(out.grad.reshape(-1)[0])
        for p in params:
            p._accumulate(g * coefficient * np.sign(p.data))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# pooling


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Windowed maximum; gradient routes to the first argmax in each window."""
    n, c, h, wdt = x.shape
    if k > h or k > wdt:
        raise ShapeError(f"pool window {k} larger than input {h}x{wdt}")
    out_h = _conv_out_dim(h, k, stride, 0)
    out_w = _conv_out_dim(wdt, k, stride, 0)
    windows = np.stack(
        [
            x.data[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
            for i in range(k)
            for j in range(k)
        ],
        axis=-1,
    )
    arg = windows.argmax(axis=-1)
    out = _node(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], (x,))

    def _backward():
        dx = np.zeros_like(x.data)
        for cell in range(k * k):
            i, j = divmod(cell, k)
            view = dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
            view += np.where(arg == cell, out.grad, 0.0)
        x._accumulate(dx)

    out._backward = _backward
    return out


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k mean pooling (stride k); spatial dims must divide."""
    n, c, h, wdt = x.shape
    if h % k or wdt % k:
        raise ShapeError(f"input {h}x{wdt} not divisible by pool size {k}")
    out_h, out_w = h // k, wdt // k
    out = _node(x.data.reshape(n, c, out_h, k, out_w, k).mean(axis=(3, 5)), (x,))

    def _backward():
        g = out.grad[:, :, :, None, :, None] / np.float32(k * k)
        x._accumulate(np.broadcast_to(g, (n, c, out_h, k, out_w, k)).reshape(x.shape))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# dense layers and glue


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N,D) by weight (D_out,D) and bias (D_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x{x.shape} w{w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    out = _node(x.data @ w.data.T + b.data, (x, w, b))

    def _backward():
        if w.requires_grad:
            w._accumulate(out.grad.T @ x.data)
        if b.requires_grad:
            b._accumulate(out.grad.sum(axis=0))
        if x.requires_grad:
            x._accumulate(out.grad @ w.data)

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch dimension."""
    n = x.shape[0]
    out = _node(x.data.reshape(n, -1), (x,))

    def _backward():
        x._accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = _node(a.data + b.data, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out._backward = _backward
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar node."""
    out = _node(np.float32(x.data.sum(dtype=np.float64)), (x,))

    def _backward():
        x._accumulate(np.full(x.shape, out.grad.reshape(-1)[0], dtype=np.float32))

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = _node(a.data * b.data, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(out.grad * a.data)

    out._backward = _backward
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    out = _node(x.data * np.float32(factor), (x,))

    def _backward():
        x._accumulate(out.grad * np.float32(factor))

    out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by max subtraction.  ``labels`` is an integer vector; values
    outside [0, K) raise :class:`LabelError`.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must lie in [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    out = _node(np.float32(loss), (logits,))

    def _backward():
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(d * (float(out.grad.reshape(-1)[0]) / n))

    out._backward = _backward
    return out
