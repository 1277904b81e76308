"""Network primitives built from the tape primitives in :mod:`tensor`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import (
    Tensor,
    col2im,
    grad,
    im2col,
    leaky_relu,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    sqrt,
    sub,
    tanh,
    transpose,
    tsum,
)


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for the given input (e.g. a zero matrix)."""


class StateError(RuntimeError):
    """Raised when a stateful layer is used before its state exists."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``weight[O,C,kh,kw]``."""
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D [B,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D [O,C,kh,kw], got shape {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d channel dimension mismatch: input C={C}, weight C_in={Cw}")
    if kh > H + 2 * padding[0]:
        raise ValueError(f"conv2d height: kernel {kh} exceeds padded input {H + 2 * padding[0]}")
    if kw > W + 2 * padding[1]:
        raise ValueError(f"conv2d width: kernel {kw} exceeds padded input {W + 2 * padding[1]}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    oh = (H + 2 * padding[0] - kh) // stride[0] + 1
    ow = (W + 2 * padding[1] - kw) // stride[1] + 1
    cols = im2col(x, (kh, kw), stride, padding)
    out = matmul(cols, transpose(reshape(weight, (O, C * kh * kw))))
    if bias is not None:
        out = out + bias
    return transpose(reshape(out, (B, oh, ow, O)), (0, 3, 1, 2))


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is laid out ``[C_in, C_out, kh, kw]``."""
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d input must be 4-D, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv_transpose2d weight must be 4-D, got shape {weight.shape}")
    B, C, H, W = x.shape
    Cw, O, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"conv_transpose2d channel dimension mismatch: input C={C}, weight C_in={Cw}")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv_transpose2d bias must have shape ({O},), got {bias.shape}")
    oh = (H - 1) * stride[0] - 2 * padding[0] + kh
    ow = (W - 1) * stride[1] - 2 * padding[1] + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"conv_transpose2d output would be empty ({oh}x{ow})")
    rows = reshape(transpose(x, (0, 2, 3, 1)), (B * H * W, C))
    cols = matmul(rows, reshape(weight, (C, O * kh * kw)))
    out = col2im(cols, (B, O, oh, ow), (kh, kw), stride, padding)
    if bias is not None:
        out = out + reshape(bias, (1, O, 1, 1))
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return out


@dataclass
class BatchNormStats:
    """Running statistics of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    num_batches: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), 0, momentum, eps)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
                 training: bool) -> Tensor:
    """Per-channel batch normalization over ``(B, H, W)``.

    In training mode the batch statistics are used and the running averages are
    updated in place; in eval mode the running averages are used.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d input must be 4-D, got shape {x.shape}")
    C = x.shape[1]
    g = reshape(gamma, (1, C, 1, 1))
    b = reshape(beta, (1, C, 1, 1))
    if not training:
        if stats.num_batches == 0:
            raise StateError("batch norm running statistics are not populated; "
                             "run a training-mode pass or load them from a checkpoint")
        m = stats.mean.reshape(1, C, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + stats.eps)).astype(x.dtype)
        return (x - m) * Tensor(inv.reshape(1, C, 1, 1)) * g + b

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 1:
        raise ValueError("batch_norm2d needs at least one value per channel")
    mu = mean(x, axis=(0, 2, 3), keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
    out = centered / sqrt(var + stats.eps) * g + b

    bm = mu.data.reshape(C)
    bv = var.data.reshape(C) * (count / max(count - 1, 1))
    mom = stats.momentum
    stats.mean[...] = (1 - mom) * stats.mean + mom * bm
    stats.var[...] = (1 - mom) * stats.var + mom * bv
    stats.num_batches += 1
    return out


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class SpectralState:
    """Persistent power-iteration vector for one normalized weight.

    ``frozen`` reuses the last estimate without iterating, which makes the
    normalized layer a fixed linear map (handy for finite-difference checks).
    """

    u: np.ndarray
    n_power_iters: int = 1
    sigma: float | None = None
    frozen: bool = False

    @classmethod
    def init(cls, rows: int, rng: np.random.Generator, n_power_iters: int = 1, dtype=np.float32):
        u = rng.standard_normal(rows)
        u /= np.linalg.norm(u)
        return cls(u.astype(dtype), n_power_iters)


def power_iteration(mat: np.ndarray, u: np.ndarray, n_iters: int) -> tuple[float, np.ndarray]:
    """Largest singular value estimate of ``mat`` and the updated left vector."""
    if n_iters < 1:
        raise ValueError("power iteration needs at least one step")
    u = u.astype(np.float64)
    m = mat.astype(np.float64)
    v = np.zeros(m.shape[1])
    for _ in range(n_iters):
        v = m.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            raise DegenerateInputError("spectral normalization of a zero (or u-orthogonal) matrix")
        v /= nv
        u = m @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            raise DegenerateInputError("spectral normalization of a zero matrix")
        u /= nu
    sigma = float(u @ m @ v)
    return sigma, u


def spectral_normalize(weight: Tensor, state: SpectralState, n_power_iters: int | None = None) -> Tensor:
    """``weight / sigma`` with ``sigma`` estimated by power iteration.

    ``sigma`` is a constant of the recorded graph: gradients do not flow
    through the power iteration.
    """
    mat = weight.data.reshape(weight.shape[0], -1)
    if not np.any(mat):
        raise DegenerateInputError("spectral normalization of a zero weight matrix")
    if state.frozen and state.sigma is not None:
        sigma = state.sigma
    else:
        n = state.n_power_iters if n_power_iters is None else n_power_iters
        sigma, u = power_iteration(mat, state.u, n)
        state.u = u.astype(state.u.dtype)
        state.sigma = sigma
    if not sigma > 0.0:
        raise DegenerateInputError(f"non-positive singular value estimate {sigma}")
    return mul(weight, 1.0 / sigma)


def input_gradient_norm(scorer: Callable[[Tensor], Tensor], x_hat: Tensor, eps: float = 0.0) -> Tensor:
    """Per-sample ``||d scorer(x_hat)_i / d x_hat_i||_2`` kept on the tape.

    ``scorer`` must return one value per batch element.  Samples are assumed
    independent (no cross-batch coupling such as batch norm inside ``scorer``).
    """
    x = x_hat if x_hat.requires_grad else Tensor(x_hat.data, requires_grad=True)
    scores = scorer(x)
    if scores.ndim > 1 and scores.size == x.shape[0]:
        scores = reshape(scores, (x.shape[0],))
    if scores.shape != (x.shape[0],):
        raise ValueError(f"scorer must return one value per batch element; got shape {scores.shape} "
                         f"for batch {x.shape[0]}")
    (g,) = grad(tsum(scores), [x], create_graph=True)
    if g is None:
        return Tensor(np.zeros(x.shape[0], dtype=x.dtype))
    flat = reshape(g, (x.shape[0], -1))
    return sqrt(tsum(mul(flat, flat), axis=1) + eps)


def gradient_penalty(norms: Tensor, weight: float) -> Tensor:
    """``weight * mean((norms - 1)^2)``."""
    d = sub(norms, 1.0)
    return mul(mean(mul(d, d)), weight)
