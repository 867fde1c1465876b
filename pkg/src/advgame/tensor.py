"""Minimal reverse-mode automatic differentiation on numpy arrays.

The engine is define-by-run: every primitive op builds a fresh graph node
holding the forward value, references to its inputs, and a closure that
propagates the upstream gradient to those inputs.  Graphs are tiny (tens of
nodes per forward pass), so the tape is simply the node graph itself and is
rebuilt on every call.

All gradient math is float64 by default; float32 arrays are accepted and
propagated unchanged for cheaper training runs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would contain NaN or Inf values."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An n-dimensional array plus the bookkeeping needed for backprop.

    ``grad`` is populated (as a plain ndarray) by :func:`backward`; it is
    reset at the start of every backward pass over the reachable graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward_fn=None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward_fn: Callable[[np.ndarray], None] | None = _backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # Convenience arithmetic; the heavy lifting lives in the module functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents, _backward_fn=backward_fn if requires else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the grad-requiring subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Backpropagate from a scalar loss through its graph.

    Populates ``grad`` on every grad-requiring node reachable from ``loss``
    (consumers' contributions are summed).  With ``wrt`` given, returns a
    mapping name -> gradient array; parameters the loss does not depend on
    get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.data)
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
    if wrt is None:
        return None
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in wrt.items()}


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise addition with numpy broadcasting."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        out_data = a.data + b.data

        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return _node(out_data, (a, b), bwd)
    out_data = a.data + b

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _node(out_data, (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor or a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        out_data = a.data * b.data

        def bwd(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

        return _node(out_data, (a, b), bwd)
    scale = b

    def bwd(g):
        _accumulate(a, g * scale)

    return _node(a.data * scale, (a,), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all entries, returned as a scalar tensor."""
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(np.asarray(a.data.sum()), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old_shape = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accumulate(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is defined as 0."""
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)

    return _node(np.maximum(a.data, 0), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def dense(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: out[b,o] = sum_i inp[b,i] w[i,o] + bias[o]."""
    inp, weight, bias = _as_tensor(inp), _as_tensor(weight), _as_tensor(bias)
    if inp.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("dense expects input [B,I], weight [I,O], bias [O]")
    if inp.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ValueError(f"dense shape mismatch: {inp.shape} x {weight.shape} + {bias.shape}")
    out_data = inp.data @ weight.data + bias.data

    def bwd(g):
        if inp.requires_grad:
            _accumulate(inp, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, inp.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _node(out_data, (inp, weight, bias), bwd)


def _conv_pad(k: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        return (k - 1) // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


# the order-exact loop kernel covers the oracle envelope (spatial <= 8x8, C <= 3)
_CONV_LOOP_MAX_HW = 64
_CONV_LOOP_MAX_C = 3


def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-d cross-correlation over [B,C,H,W] with kernel [F,C,k,k].

    For small spatial inputs the accumulation order over (c, ky, kx) is
    fixed, so the result is bit-identical to a nested-loop evaluation in the
    same order; larger inputs take an im2col/GEMM path.
    """
    inp, kernel, bias = _as_tensor(inp), _as_tensor(kernel), _as_tensor(bias)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if inp.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects input [B,C,H,W] and kernel [F,C,k,k]")
    B, C, H, W = inp.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C or kh != kw:
        raise ValueError(f"kernel {kernel.shape} does not match input channels {C} or is not square")
    if bias.shape != (F,):
        raise ValueError(f"bias shape {bias.shape} != ({F},)")
    k = kh
    pad = _conv_pad(k, padding)
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ValueError(f"kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1

    x = inp.data
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    if H * W <= _CONV_LOOP_MAX_HW and C <= _CONV_LOOP_MAX_C:
        out = np.zeros((B, F, Ho, Wo), dtype=x.dtype)
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    patch = x[:, c, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride]
                    out += patch[:, None] * kernel.data[None, :, c, ky, kx, None, None]
        out = out + bias.data[None, :, None, None]
        cols = None
    else:
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        flat = cols @ kernel.data.reshape(F, -1).T
        out = flat.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def bwd(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if cols is None:
            if kernel.requires_grad:
                gk = np.zeros_like(kernel.data)
                for c in range(C):
                    for ky in range(k):
                        for kx in range(k):
                            patch = x[:, c, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride]
                            gk[:, c, ky, kx] = np.einsum("bhw,bfhw->f", patch, g)
                _accumulate(kernel, gk)
            if inp.requires_grad:
                gx = np.zeros_like(x)
                for c in range(C):
                    for ky in range(k):
                        for kx in range(k):
                            gx[:, c, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride] += np.einsum(
                                "f,bfhw->bhw", kernel.data[:, c, ky, kx], g
                            )
                if pad:
                    gx = gx[:, :, pad : pad + H, pad : pad + W]
                _accumulate(inp, gx)
            return
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        if kernel.requires_grad:
            _accumulate(kernel, (g2.T @ cols).reshape(F, C, k, k))
        if inp.requires_grad:
            gcols = (g2 @ kernel.data.reshape(F, -1)).reshape(B, Ho, Wo, C, k, k)
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros_like(x)
            for ky in range(k):
                for kx in range(k):
                    gx[:, :, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride] += gcols[..., ky, kx]
            if pad:
                gx = gx[:, :, pad : pad + H, pad : pad + W]
            _accumulate(inp, gx)

    return _node(out, (inp, kernel, bias), bwd)


def batchnorm(
    inp: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over [B,C,H,W].

    Train mode normalizes with batch statistics and updates the running
    buffers in place via ``running <- momentum * running + (1-momentum) * batch``.
    Infer mode normalizes with the running buffers.
    """
    inp, gamma, beta = _as_tensor(inp), _as_tensor(gamma), _as_tensor(beta)
    if inp.data.ndim != 4:
        raise ValueError("batchnorm expects input [B,C,H,W]")
    B, C, H, W = inp.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("gamma/beta must have shape (C,)")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    x = inp.data
    if mode == "train":
        if B < 2:
            raise ValueError("batchnorm train mode requires batch size >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mean
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * x_hat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if inp.requires_grad:
            gs = g * gamma.data[None, :, None, None]
            if mode == "train":
                n = B * H * W
                mean_gs = gs.mean(axis=(0, 2, 3))
                mean_gs_xhat = (gs * x_hat).mean(axis=(0, 2, 3))
                gx = inv_std[None, :, None, None] * (
                    gs - mean_gs[None, :, None, None] - x_hat * mean_gs_xhat[None, :, None, None]
                )
                del n
            else:
                gx = gs * inv_std[None, :, None, None]
            _accumulate(inp, gx)

    return _node(out, (inp, gamma, beta), bwd)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax along the last axis (plain numpy)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Backward produces (softmax - onehot) / B on the logits.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError("softmax_cross_entropy expects logits [B,C]")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must be in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    log_p = log_softmax(logits.data)
    loss = -log_p[np.arange(B), labels].mean()

    def bwd(g):
        softmax = np.exp(log_p)
        softmax[np.arange(B), labels] -= 1.0
        _accumulate(logits, g * softmax / B)

    return _node(np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer step and gradient-check oracle
# ---------------------------------------------------------------------------

def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """One SGD step with momentum and L2 regularization, in place.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
    Parameters missing from ``grads`` are left untouched.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"velocity shape {v.shape} != param shape {p.shape} for {name!r}")
        v = momentum * v + (g + weight_decay * p.data)
        velocity[name] = v
        p.data[...] = p.data - lr * v


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by max(1, largest numeric entry)."""
    scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale
