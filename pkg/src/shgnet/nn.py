"""Tiny module system: parameter registration, train/eval mode, state dicts."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    RunningStats,
    Tensor,
    batchnorm2d,
    conv2d,
    dropout,
    linear,
    relu,
)


class Module:
    """Base class; attributes holding ``Tensor`` parameters or ``Module``s are tracked."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            if isinstance(mod, BatchNorm2d):
                yield f"{mod_name}.running_mean", mod.stats.mean
                yield f"{mod_name}.running_var", mod.stats.var

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != {own[name].shape}")
            own[name][...] = arr

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer (e.g. to float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                m.stats.mean = m.stats.mean.astype(dtype)
                m.stats.var = m.stats.var.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _param(data, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        fan_out = out_ch * k * k
        # He init in fan-out mode, as for torchvision ResNets
        self.weight = _param(rng.normal(0, np.sqrt(2.0 / fan_out), (out_ch, in_ch, k, k)), "weight")
        self.bias = _param(np.zeros(out_ch), "bias") if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Batch norm whose statistics stop updating once ``frozen`` is set."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = _param(np.ones(channels), "gamma")
        self.beta = _param(np.zeros(channels), "beta")
        self.stats = RunningStats.fresh(channels, DEFAULT_DTYPE, momentum)
        self.eps = eps
        self.frozen = False

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training and not self.frozen else "eval"
        return batchnorm2d(x, self.gamma, self.beta, self.stats, mode, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _param(rng.uniform(-bound, bound, (in_features, out_features)), "weight")
        self.bias = _param(rng.uniform(-bound, bound, out_features), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.p = p
        self.rng = rng or np.random.default_rng()

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, "train" if self.training else "eval", self.rng)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)
