"""
Parameter containers and small dense layers built on the autodiff tape
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Registers ``Parameter`` and child ``Module`` attributes in assignment order"""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._parameters[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, param in self._parameters.items():
            yield prefix + key, param
        for key, child in self._modules.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters; callers validate names and shapes first"""
        for name, param in self.named_parameters():
            param.data = np.array(state[name], dtype=np.float64).reshape(param.shape)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """Indexed children named ``0``, ``1``, ..."""

    def __init__(self, modules: List[Module]):
        super().__init__()
        for i, module in enumerate(modules):
            setattr(self, str(i), module)

    def __getitem__(self, index: int) -> Module:
        return self._modules[str(index)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


def gaussian(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def fan_in_std(fan_in: int) -> float:
    return float(np.sqrt(1.0 / max(1, fan_in)))


class Linear(Module):
    """y = x @ W + b with W stored as (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, std: Optional[float] = None, zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = gaussian(rng, (in_features, out_features), std if std is not None else fan_in_std(in_features))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class LayerNorm(Module):
    """Last-axis layer norm with affine scale and shift"""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def forward(self, x) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, eps=self.eps), self.scale), self.shift)


class Mlp(Module):
    """Linear -> relu -> Linear"""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator,
                 hidden_std: Optional[float] = None, zero_last: bool = False):
        super().__init__()
        self.hidden = Linear(in_features, hidden, rng, std=hidden_std)
        self.out = Linear(hidden, out_features, rng, zero_init=zero_last)

    def forward(self, x) -> Tensor:
        return self.out(ad.relu(self.hidden(x)))


class Conv2dLayer(Module):
    """3x3 (by default) single-sample convolution with bias"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, std: Optional[float] = None, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        shape = (out_channels, in_channels, kernel, kernel)
        if zero_init:
            weight = np.zeros(shape)
        else:
            weight = gaussian(rng, shape, std if std is not None else fan_in_std(in_channels * kernel * kernel))
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
