"""Minimal module system: parameter ownership, naming, and train/eval mode."""
from __future__ import annotations

from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as A
from .autodiff import Parameter, Var
from .tensor import ConfigError, get_dtype

__all__ = ["Module", "Conv2d", "BatchNorm2d", "Linear", "kaiming_normal", "current_path"]

_path_stack: List[Tuple[str, Optional[str]]] = []


def current_path() -> Tuple[str, Optional[str]]:
    """(module path, cost category) of the innermost module being called."""
    return _path_stack[-1] if _path_stack else ("", None)


def kaiming_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """He-normal init with fan-out = C_out * k * k."""
    fan_out = shape[0] * (shape[2] * shape[3] if len(shape) == 4 else 1)
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)


class Module:
    """Base class. Submodules and parameters are discovered from attributes."""

    training: bool = True
    # cost-accounting bucket for analysis; inherited by children when None
    flops_category: Optional[str] = None
    _path: str = ""

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        parent_path, parent_cat = current_path()
        cat = self.flops_category or parent_cat
        _path_stack.append((self._path, cat))
        try:
            return self.forward(*args)
        except (ValueError, RuntimeError) as exc:
            if self._path and not getattr(exc, "_affuse_pathed", False):
                exc.args = (f"[{self._path}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
                exc._affuse_pathed = True
            raise
        finally:
            _path_stack.pop()

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), val
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for path, mod in self.modules(prefix):
            if isinstance(mod, BatchNorm2d):
                yield f"{path}.running_mean", mod.running_mean
                yield f"{path}.running_var", mod.running_var

    def assign_names(self, prefix: str = "") -> "Module":
        """Stamp dotted paths onto every submodule and parameter."""
        for path, mod in self.modules(prefix):
            mod._path = path
        for path, p in self.named_parameters(prefix):
            p.name = path
        return self

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters() if p.trainable))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: Optional[int] = None,
                 bias: bool = False, rng: Optional[np.random.Generator] = None, init: str = "kaiming"):
        if k not in (1, 3, 5):
            raise ConfigError(f"kernel size must be 1, 3 or 5, got {k}")
        if stride < 1:
            raise ConfigError(f"stride must be positive, got {stride}")
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        if init == "zeros":
            w = np.zeros(shape)
        else:
            w = kaiming_normal(rng if rng is not None else np.random.default_rng(0), shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None

    @property
    def c_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.value.shape[0]

    @property
    def k(self) -> int:
        return self.weight.value.shape[2]

    def forward(self, x: Var) -> Var:
        return A.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        dt = get_dtype()
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels, dt)
        self.running_var = np.ones(channels, dt)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Var) -> Var:
        return A.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.eps, self.momentum, self.training)


class Linear(Module):
    """Fully connected layer.

    The default ``"uniform"`` init draws from ``U(-1/sqrt(c_in), 1/sqrt(c_in))``
    so initial logits stay near zero; ``"kaiming"`` uses the fan-out rule of
    the convolutions.
    """

    def __init__(self, c_in: int, c_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, init: str = "uniform"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((c_out, c_in))
        elif init == "uniform":
            bound = 1.0 / np.sqrt(c_in)
            w = rng.uniform(-bound, bound, (c_out, c_in))
        else:
            w = kaiming_normal(rng, (c_out, c_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None

    def forward(self, x: Var) -> Var:
        return A.fully_connected(x, self.weight, self.bias)
