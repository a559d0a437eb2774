"""Minimal NCHW tensor ops with analytic gradients.

Conventions used across the package:
  * activations, weights and gradients are numpy arrays, laid out
    (batch, channels, height, width), dtype float32;
  * every reduction (conv inner products, bias sums, alpha sums)
    accumulates in float64 and is stored back in the array dtype, so
    results are deterministic and stable under gradient checking;
  * ops are pure functions -- they never mutate their inputs.

Feeding float64 arrays through the same functions keeps the whole
computation in float64, which is what `gradient_check` does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an op receives arrays whose dimensions disagree."""


class NonDeterministicClosureError(RuntimeError):
    """Raised by gradient_check when two evaluations of the loss differ."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Weights for a 2D convolution (cross-correlation, zero 'same' padding).

    weights: (out_channels, in_channels, kh, kw), or (channels, 1, kh, kw)
             when depthwise.
    bias:    (out_channels,)
    """

    weights: np.ndarray
    bias: np.ndarray
    depthwise: bool = False

    def __post_init__(self):
        _check(self.weights.ndim == 4,
               f"conv weights must be rank 4, got rank {self.weights.ndim}")
        _check(self.bias.ndim == 1 and self.bias.shape[0] == self.weights.shape[0],
               f"bias length {self.bias.shape} != out_channels {self.weights.shape[0]}")
        if self.depthwise:
            _check(self.weights.shape[1] == 1,
                   "depthwise conv weights must have a singleton channel dim")
        _check(self.kernel_h % 2 == 1 and self.kernel_w % 2 == 1,
               f"kernel dims must be odd, got {self.kernel_h}x{self.kernel_w}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        # depthwise maps each input channel to the matching output channel
        return self.weights.shape[0] if self.depthwise else self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


def _pad_same(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = kh // 2, kw // 2
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Float64 patch matrix of shape (c*kh*kw, n*h*w) for 'same' padding."""
    n, c, h, w = x.shape
    xpad = _pad_same(x, kh, kw)
    cols = np.empty((c, kh, kw, n, h, w), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xpad[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * h * w)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Stride-1 'same' cross-correlation; output keeps the spatial dims."""
    _check(x.ndim == 4, f"conv input must be rank 4, got rank {x.ndim}")
    _check(x.shape[1] == params.in_channels,
           f"input channels {x.shape[1]} != conv in_channels {params.in_channels}")
    n, c, h, w = x.shape
    kh, kw = params.kernel_h, params.kernel_w
    oc = params.out_channels
    w64 = params.weights.astype(np.float64)
    b64 = params.bias.astype(np.float64)
    if params.depthwise:
        cols = _im2col(x, kh, kw).reshape(c, kh * kw, n * h * w)
        out = np.einsum("ckp,ck->cp", cols, w64.reshape(c, kh * kw))
        out = out.reshape(c, n, h, w)
    else:
        cols = _im2col(x, kh, kw)
        out = (w64.reshape(oc, c * kh * kw) @ cols).reshape(oc, n, h, w)
    out += b64[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3).astype(x.dtype))


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Analytic gradients of conv2d_forward.

    Returns (grad_input, grad_weights, grad_bias).
    """
    n, c, h, w = x.shape
    kh, kw = params.kernel_h, params.kernel_w
    oc = params.out_channels
    _check(grad_out.shape == (n, oc, h, w),
           f"grad_out shape {grad_out.shape} != forward output shape "
           f"{(n, oc, h, w)}")

    gmat = grad_out.transpose(1, 0, 2, 3).reshape(oc, n * h * w).astype(np.float64)
    grad_bias = gmat.sum(axis=1).astype(x.dtype)

    cols = _im2col(x, kh, kw)
    if params.depthwise:
        grad_w = np.einsum("ckp,cp->ck", cols.reshape(c, kh * kw, n * h * w),
                           gmat).reshape(params.weights.shape)
    else:
        grad_w = (gmat @ cols.T).reshape(params.weights.shape)
    grad_w = grad_w.astype(x.dtype)

    # grad wrt input: correlate grad_out with the spatially flipped kernels,
    # in/out channels swapped (exact for stride 1 + odd 'same' padding)
    wflip = params.weights[:, :, ::-1, ::-1].astype(np.float64)
    gcols = _im2col(grad_out, kh, kw)
    if params.depthwise:
        grad_x = np.einsum("ckp,ck->cp", gcols.reshape(oc, kh * kw, n * h * w),
                           wflip.reshape(oc, kh * kw))
        grad_x = grad_x.reshape(oc, n, h, w)
    else:
        # rows of wT follow the (out, kh, kw) column layout of gcols
        wT = np.ascontiguousarray(wflip.transpose(1, 0, 2, 3)).reshape(c, -1)
        grad_x = (wT @ gcols).reshape(c, n, h, w)
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3).astype(x.dtype))
    return grad_x, grad_w, grad_bias


def conv2d_forward_naive(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Quadruple-loop reference convolution. Slow; used as the oracle."""
    _check(x.shape[1] == params.in_channels,
           f"input channels {x.shape[1]} != conv in_channels {params.in_channels}")
    n, c, h, w = x.shape
    kh, kw = params.kernel_h, params.kernel_w
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n, params.out_channels, h, w), dtype=np.float64)
    wgt = params.weights.astype(np.float64)
    for b in range(n):
        for o in range(params.out_channels):
            in_range = [o] if params.depthwise else range(c)
            for y in range(h):
                for xx in range(w):
                    acc = float(params.bias[o])
                    for ci_pos, ci in enumerate(in_range):
                        for u in range(kh):
                            for v in range(kw):
                                sy, sx = y + u - ph, xx + v - pw
                                if 0 <= sy < h and 0 <= sx < w:
                                    wi = 0 if params.depthwise else ci_pos
                                    acc += wgt[o, wi, u, v] * float(x[b, ci, sy, sx])
                    out[b, o, y, xx] = acc
    return out.astype(x.dtype)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

@dataclass
class PReLUParams:
    """Learnable negative slope, one per channel or a single shared value."""

    alpha: np.ndarray  # shape (channels,) or (1,)

    def __post_init__(self):
        _check(self.alpha.ndim == 1, "alpha must be a 1-D array")

    def _broadcast(self, channels: int) -> np.ndarray:
        _check(self.alpha.shape[0] in (1, channels),
               f"alpha count {self.alpha.shape[0]} matches neither 1 nor "
               f"channel count {channels}")
        return self.alpha.reshape(1, -1, 1, 1)


def prelu_forward(x: np.ndarray, params: PReLUParams) -> np.ndarray:
    """x if x > 0 else alpha * x (the x == 0 samples take the alpha branch)."""
    a = params._broadcast(x.shape[1]).astype(x.dtype)
    return np.maximum(x, 0) + a * np.minimum(x, 0)


def prelu_backward(x: np.ndarray, params: PReLUParams, grad_out: np.ndarray):
    """Returns (grad_input, grad_alpha); alpha gradient sums grad*x over x <= 0."""
    _check(grad_out.shape == x.shape,
           f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    a = params._broadcast(x.shape[1]).astype(x.dtype)
    pos = x > 0
    grad_x = np.where(pos, grad_out, a * grad_out)
    contrib = np.where(pos, 0.0, grad_out.astype(np.float64) * x.astype(np.float64))
    grad_a = contrib.sum(axis=(0, 2, 3))
    if params.alpha.shape[0] == 1:
        grad_a = grad_a.sum(keepdims=True)
    return grad_x, grad_a.astype(x.dtype)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _check(grad_out.shape == x.shape,
           f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, np.zeros((), dtype=x.dtype))


# ---------------------------------------------------------------------------
# sub-pixel rearrangement
# ---------------------------------------------------------------------------

def pixel_shuffle(x: np.ndarray, scale: int) -> np.ndarray:
    """(n, c*s*s, h, w) -> (n, c, h*s, w*s), standard sub-pixel layout."""
    n, c, h, w = x.shape
    s = scale
    _check(c % (s * s) == 0,
           f"channel count {c} not divisible by scale^2 = {s * s}")
    oc = c // (s * s)
    out = x.reshape(n, oc, s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out.reshape(n, oc, h * s, w * s))


def pixel_unshuffle(x: np.ndarray, scale: int) -> np.ndarray:
    """Inverse of pixel_shuffle."""
    n, c, h, w = x.shape
    s = scale
    _check(h % s == 0 and w % s == 0,
           f"spatial dims {h}x{w} not divisible by scale {s}")
    out = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n, c * s * s, h // s, w // s))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates over a flat parameter vector."""

    step: int
    m: np.ndarray
    v: np.ndarray


def adam_init(num_params: int, dtype=DTYPE) -> AdamState:
    return AdamState(step=0,
                     m=np.zeros(num_params, dtype=dtype),
                     v=np.zeros(num_params, dtype=dtype))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update with bias correction; mutates `state`, returns new params."""
    _check(params.shape == grads.shape == state.m.shape,
           f"params {params.shape} / grads {grads.shape} / state {state.m.shape} "
           "lengths disagree")
    state.step += 1
    t = state.step
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** t)
    v_hat = state.v / (1.0 - beta2 ** t)
    return (params - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    tolerance: float
    num_params: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}) at component {self.worst_index} "
                f"[analytic {self.analytic_at_worst:.6e}, "
                f"numeric {self.numeric_at_worst:.6e}] over {self.num_params} params")


def gradient_check(loss_and_grad, params: np.ndarray, eps: float = 1e-3,
                   tolerance: float = 1e-3) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    loss_and_grad maps a float64 parameter vector to (scalar loss, gradient
    vector) and must be deterministic; the first evaluation is repeated to
    detect closures that are not. Relative error per component is
    |a - f| / max(|a|, |f|, 1e-4); the floor keeps noise on near-zero
    gradients from dominating the report.
    """
    p0 = np.asarray(params, dtype=np.float64).copy()
    loss_a, grad = loss_and_grad(p0)
    loss_b, _ = loss_and_grad(p0)
    if loss_a != loss_b:
        raise NonDeterministicClosureError(
            f"closure returned {loss_a!r} then {loss_b!r} for identical parameters")
    grad = np.asarray(grad, dtype=np.float64)
    _check(grad.shape == p0.shape,
           f"gradient shape {grad.shape} != params shape {p0.shape}")

    numeric = np.empty_like(p0)
    for i in range(p0.size):
        saved = p0[i]
        p0[i] = saved + eps
        hi, _ = loss_and_grad(p0)
        p0[i] = saved - eps
        lo, _ = loss_and_grad(p0)
        p0[i] = saved
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-4)
    rel = np.abs(grad - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(max_rel_error=float(rel[worst]),
                           worst_index=worst,
                           analytic_at_worst=float(grad[worst]),
                           numeric_at_worst=float(numeric[worst]),
                           tolerance=tolerance,
                           num_params=p0.size)
