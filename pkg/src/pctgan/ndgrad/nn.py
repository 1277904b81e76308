"""Minimal module system: parameters, buffers, and the layers the networks need."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, tsum

INIT_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class.  Child modules and parameters are discovered from attributes."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _load_own_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._own_buffers().items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for verification)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            m._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, b in self.named_buffers():
            state[name] = np.array(b, copy=True)
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays into this module; names and shapes must match exactly."""
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        extra = [k for k in state if k not in expected]
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, ref in expected.items():
            if np.shape(state[name]) != ref.shape:
                raise ValueError(f"{name}: expected shape {ref.shape}, got {np.shape(state[name])}")
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
        for mod_name, mod in self._named_modules():
            prefix = mod_name + "." if mod_name else ""
            for bname in list(mod._own_buffers()):
                mod._load_own_buffer(bname, np.asarray(state[prefix + bname]))

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child._named_modules(prefix + "." + name if prefix else name)


def _normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


class SpectralMixin:
    """Optional spectral normalization of ``self.weight`` with a persistent ``u``."""

    sn: F.SpectralState | None

    def _init_sn(self, spectral: bool, rng, n_power_iters: int, dtype) -> None:
        self.sn = F.SpectralState.init(self.weight.shape[0], rng, n_power_iters, dtype) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return F.spectral_normalize(self.weight, self.sn)

    def _own_buffers(self):
        return {"sn_u": self.sn.u} if self.sn is not None else {}

    def _load_own_buffer(self, name, value):
        if name != "sn_u" or self.sn is None:
            raise KeyError(name)
        self.sn.u = np.array(value, dtype=self.sn.u.dtype, copy=True)
        self.sn.sigma = None

    def _cast_buffers(self, dtype):
        if self.sn is not None:
            self.sn.u = self.sn.u.astype(dtype)


class Linear(SpectralMixin, Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 spectral: bool = False, rng=None, dtype=np.float32, n_power_iters: int = 1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_normal(rng, (out_features, in_features), dtype))
        self.bias = Parameter(np.zeros(out_features, dtype)) if bias else None
        self._init_sn(spectral, rng, n_power_iters, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.effective_weight(), self.bias)


class Conv2d(SpectralMixin, Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2, padding: int = 1,
                 spectral: bool = False, rng=None, dtype=np.float32, n_power_iters: int = 1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_normal(rng, (out_ch, in_ch, kernel, kernel), dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype))
        self.stride, self.padding = stride, padding
        self._init_sn(spectral, rng, n_power_iters, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2, padding: int = 1,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_normal(rng, (in_ch, out_ch, kernel, kernel), dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.stats = F.BatchNormStats.fresh(channels, dtype, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.gamma, self.beta, self.stats, self.training)

    def _own_buffers(self):
        return {
            "running_mean": self.stats.mean,
            "running_var": self.stats.var,
            "num_batches": np.array([self.stats.num_batches], dtype=np.float32),
        }

    def _load_own_buffer(self, name, value):
        if name == "running_mean":
            self.stats.mean = np.array(value, dtype=self.stats.mean.dtype, copy=True)
        elif name == "running_var":
            self.stats.var = np.array(value, dtype=self.stats.var.dtype, copy=True)
        elif name == "num_batches":
            self.stats.num_batches = int(np.asarray(value).reshape(-1)[0])
        else:
            raise KeyError(name)

    def _cast_buffers(self, dtype):
        self.stats.mean = self.stats.mean.astype(dtype)
        self.stats.var = self.stats.var.astype(dtype)


def global_sum_pool(x: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, C]``."""
    return tsum(x, axis=(2, 3))
