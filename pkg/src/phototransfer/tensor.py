"""Reverse-mode autodiff over NCHW float32 tensors.

Only the operators needed by the U-Net and its losses are provided. Each op
records its parents and a backward closure; ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STD_EPS = 1e-6


class Tensor:
    """Dense array with an optional gradient buffer.

    ``data`` is float32 unless a float64 array is passed with
    ``dtype=np.float64`` (used by gradient checks only).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=np.float32):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"tensor {name or '<anon>'} contains NaN or Inf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate buffers once consumed
                if node._parents:
                    node._backward = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ValueError(f"{what} must be 4-D (n, c, h, w), got shape {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``kernel`` has shape (out_c, in_c, kh, kw), ``bias`` shape (out_c,).
    """
    _check_4d(x, "conv2d input")
    _check_4d(kernel, "conv2d kernel")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    oc, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: kernel expects {kc} input channels, input has {c} (input shape {x.shape}, kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c*kh*kw, oh*ow): the copy keeps output rows contiguous
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    wmat = kernel.data.reshape(oc, c * kh * kw)
    out_data = np.matmul(wmat, cols)
    if bias is not None:
        out_data += bias.data[:, None]
    out_data = out_data.reshape(n, oc, oh, ow)

    parents = [x, kernel] + ([bias] if bias is not None else [])
    out = Tensor._result(out_data, parents)
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            g_flat = g.reshape(n, oc, oh * ow)
            if kernel.requires_grad:
                kernel._accumulate(np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g_flat.sum(axis=(0, 2)))
            if x.requires_grad:
                dcols = np.matmul(wmat.T, g_flat).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
                x._accumulate(dxp)
        out._backward = _backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must be in [0, 1), got {slope}")
    pos = x.data > 0
    out = Tensor._result(np.where(pos, x.data, x.data * x.data.dtype.type(slope)), [x])
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            x._accumulate(np.where(pos, g, g * g.dtype.type(slope)))
        out._backward = _backward
    return out


def upsample2x_nearest(x: Tensor) -> Tensor:
    _check_4d(x, "upsample input")
    n, c, h, w = x.shape
    up = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = Tensor._result(up, [x])
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
        out._backward = _backward
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat operand a")
    _check_4d(b, "concat operand b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor._result(np.concatenate([a.data, b.data], axis=1), [a, b])
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g[:, :ca])
            if b.requires_grad:
                b._accumulate(g[:, ca:])
        out._backward = _backward
    return out


def weighted_sum(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar ``sum(x * weights)``; plain sum when ``weights`` is None."""
    if weights is None:
        weights = np.ones_like(x.data)
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.shape:
        raise ValueError(f"weights shape {weights.shape} != tensor shape {x.shape}")
    out = Tensor._result(np.asarray(np.sum(x.data * weights), dtype=x.data.dtype), [x])
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            x._accumulate(weights * g)
        out._backward = _backward
    return out


def _check_finite_scalar(value: np.ndarray, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} is not finite ({float(value)})")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error. The subgradient at ties is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    value = np.asarray(np.mean(np.abs(diff)), dtype=pred.data.dtype)
    _check_finite_scalar(value, "l1 loss")
    out = Tensor._result(value, [pred, target])
    if out.requires_grad:
        scale = pred.data.dtype.type(1.0 / diff.size)

        def _backward(g: np.ndarray) -> None:
            s = np.sign(diff) * (g * scale)
            if pred.requires_grad:
                pred._accumulate(s)
            if target.requires_grad:
                target._accumulate(-s)
        out._backward = _backward
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def bce_with_logits_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from raw logits.

    Uses ``max(x, 0) - x*t + log1p(exp(-|x|))`` so no sigmoid is ever
    evaluated in a way that can overflow.
    """
    if logits.shape != target.shape:
        raise ValueError(f"bce_with_logits_loss: shape mismatch {logits.shape} vs {target.shape}")
    t = target.data
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce_with_logits_loss: targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    value = np.asarray(np.mean(per), dtype=x.dtype)
    _check_finite_scalar(value, "bce loss")
    out = Tensor._result(value, [logits])
    if out.requires_grad:
        def _backward(g: np.ndarray) -> None:
            logits._accumulate((_sigmoid(x) - t) * (g / x.size))
        out._backward = _backward
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays (inference only)."""
    return _sigmoid(np.asarray(x))


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """In-place Adam update with bias correction.

    Raises before touching anything if any gradient is non-finite. A missing
    gradient (``None``) is treated as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("adam_step: params, grads and state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.first_moment[i].shape != p.shape:
            raise ValueError(f"adam_step: moment shape {state.first_moment[i].shape} != param shape {p.shape}")
        if g is not None:
            if g.shape != p.shape:
                raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"adam_step: non-finite gradient for parameter {i}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Thin optimizer wrapper around :func:`adam_step` for a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.002, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.zeros_like([p.data for p in self.params], lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


def standardize(image: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-image, per-channel z-scores.

    Statistics are taken over (h, w) for each (n, c) slice; std is clamped to
    ``STD_EPS`` so flat patches map to zeros instead of Inf.
    """
    _check_4d(image, "standardize input")
    x = image.data.astype(np.float64)
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = np.maximum(x.std(axis=(2, 3), keepdims=True), STD_EPS)
    out = ((x - mean) / std).astype(image.data.dtype)
    return Tensor(out), mean[:, :, 0, 0], std[:, :, 0, 0]
