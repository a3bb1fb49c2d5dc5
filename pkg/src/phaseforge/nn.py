"""Small numpy layer toolkit: convolution, pooling, upsampling, residual blocks, softmax
cross-entropy and Adam.

Tensors are ``(channels, height, width)`` with no batch axis.  Every op works in
the dtype it is given (float32 for training, float64 for gradient checks); sums
that feed a loss or a bias gradient are accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OddDimensions, ShapeMismatch, TargetOutOfRange


@dataclass
class Tensor:
    data: np.ndarray
    requires_grad: bool = True
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    C, H, W = x.shape
    if k == 1:
        return x.reshape(C, H * W)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # C, H, W, k, k
    return win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, H * W)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, cols: np.ndarray | None = None):
    """Same-size stride-1 cross-correlation (zero padding k//2) plus bias.

    Returns ``(y, cols)``; ``cols`` is the im2col matrix the backward pass reuses.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3] \
            or w.shape[2] not in (1, 3) or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    O, C, k, _ = w.shape
    _, H, W = x.shape
    if cols is None:
        cols = _im2col(x, k)
    y = w.reshape(O, C * k * k) @ cols
    y += b[:, None]
    return y.reshape(O, H, W), cols


def conv2d_backward(dy: np.ndarray, x_shape: tuple[int, int, int], w: np.ndarray, cols: np.ndarray):
    """Gradients ``(dx, dw, db)`` of the conv forward map."""
    O, C, k, _ = w.shape
    _, H, W = x_shape
    if dy.shape != (O, H, W):
        raise ShapeMismatch(f"conv2d backward: upstream {dy.shape}, expected {(O, H, W)}")
    dy2 = dy.reshape(O, H * W)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1, dtype=np.float64).astype(dy.dtype)
    dcols = w.reshape(O, C * k * k).T @ dy2
    if k == 1:
        return dcols.reshape(C, H, W), dw, db
    p = k // 2
    dcols = dcols.reshape(C, k, k, H, W)
    dxp = np.zeros((C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W] += dcols[:, i, j]
    return dxp[:, p:p + H, p:p + W].copy(), dw, db


# ---------------------------------------------------------- elementwise / shape

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2.  Returns ``(y, argmax)``; ties resolve to the first index."""
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise OddDimensions(f"maxpool2 needs even height and width, got {H}x{W}")
    blocks = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]
    return y, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    C, h, w = dy.shape
    blocks = np.zeros((C, h, w, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, idx[..., None], dy[..., None], -1)
    return blocks.reshape(C, h, w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * h, 2 * w)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    C, H, W = dy.shape
    if H % 2 or W % 2:
        raise OddDimensions(f"upsample2 backward needs even sizes, got {H}x{W}")
    return dy.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


def concat_forward(*xs: np.ndarray) -> np.ndarray:
    if len({x.shape[1:] for x in xs}) != 1:
        raise ShapeMismatch(f"concat: spatial sizes differ: {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=0)


def concat_backward(dy: np.ndarray, channels: Iterable[int]) -> list[np.ndarray]:
    cuts = np.cumsum(list(channels))[:-1]
    return np.split(dy, cuts, axis=0)


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatch(f"residual add: {a.shape} vs {b.shape}")
    return a + b


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean masked cross-entropy of per-pixel class logits ``(K, H, W)``.

    Returns ``(loss, dlogits)``.  With no masked pixels the loss is 0 and the
    gradient vanishes.
    """
    K = logits.shape[0]
    target = np.asarray(target)
    mask = np.ones(target.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if target.shape != logits.shape[1:] or mask.shape != target.shape:
        raise ShapeMismatch(f"logits {logits.shape}, target {target.shape}, mask {mask.shape}")
    t = target[mask]
    if t.size and (t.min() < 0 or t.max() >= K):
        raise TargetOutOfRange(f"targets must lie in [0, {K - 1}]")
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=0, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=0, keepdims=True)
    tgt = np.where(mask, target, 0)[None]
    logp_t = np.take_along_axis(shifted, tgt, 0)[0] - np.log(denom[0])
    loss = -float(np.sum(logp_t[mask], dtype=np.float64)) / n
    grad = expd / denom
    np.put_along_axis(grad, tgt, np.take_along_axis(grad, tgt, 0) - 1, 0)
    grad *= mask[None] / n
    return loss, grad.astype(logits.dtype, copy=False)


# --------------------------------------------------------------------- layers

class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, name: str,
                 dtype=np.float32):
        fan_in = in_ch * k * k
        w = rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
        self.weight = Tensor(w.astype(dtype))
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype))
        self.name = name
        self._cache = None

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cols = conv2d_forward(x, self.weight.data, self.bias.data)
        self._cache = (x.shape, cols)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x_shape, cols = self._cache
        dx, dw, db = conv2d_backward(dy, x_shape, self.weight.data, cols)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ResidualBlock:
    """``x + conv(relu(conv(x)))``."""

    def __init__(self, ch: int, rng: np.random.Generator, name: str, dtype=np.float32):
        self.conv1 = Conv2d(ch, ch, 3, rng, f"{name}.conv1", dtype)
        self.conv2 = Conv2d(ch, ch, 3, rng, f"{name}.conv2", dtype)
        self._h = None

    def params(self) -> dict[str, Tensor]:
        return {**self.conv1.params(), **self.conv2.params()}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._h = self.conv1.forward(x)
        return residual_add(x, self.conv2.forward(relu_forward(self._h)))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = relu_backward(self.conv2.backward(dy), self._h)
        return dy + self.conv1.backward(dh)


# ------------------------------------------------------------------ optimizer

def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``param``; ``state`` holds ``t``, ``m``, ``v``."""
    if grad.shape != param.shape:
        raise ShapeMismatch(f"adam: grad {grad.shape} vs param {param.shape}")
    if "m" not in state:
        state.update(t=0, m=np.zeros(param.shape), v=np.zeros(param.shape))
    state["t"] += 1
    t = state["t"]
    g = grad.astype(np.float64)
    state["m"] = beta1 * state["m"] + (1 - beta1) * g
    state["v"] = beta2 * state["v"] + (1 - beta2) * g * g
    m_hat = state["m"] / (1 - beta1 ** t)
    v_hat = state["v"] / (1 - beta2 ** t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, dict] = {name: {} for name in params}

    def step(self, scale: float = 1.0) -> None:
        """Apply one update using ``scale * grad`` for every parameter (names in sorted order)."""
        for name in sorted(self.params):
            p = self.params[name]
            adam_step(p.data, p.grad * scale, self.state[name], self.lr,
                      self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ------------------------------------------------------------- gradient check

def numerical_gradient(fn: Callable[[], float], x: np.ndarray, step: float = 1e-3,
                       indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.ndindex(*x.shape) if indices is None else indices
    for idx in it:
        old = x[idx]
        x[idx] = old + step
        fp = fn()
        x[idx] = old - step
        fm = fn()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a-n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
