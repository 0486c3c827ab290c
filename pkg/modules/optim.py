"""
AdamW with decoupled weight decay and the cosine learning-rate schedule
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from modules.autodiff import GradientError, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step count"""
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Sequence[Tuple[str, Tensor]], state: AdamState, lr: float,
                   betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.01) -> None:
    """One adaptive-moment update; decay is applied to the weights, not the gradients"""
    for name, param in params:
        if param.grad is None:
            raise GradientError(f"optimizer_step: parameter '{name}' has no gradient")

    beta1, beta2 = betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for name, param in params:
        grad = param.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
            state.first_moment[name] = m
            state.second_moment[name] = v
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad

        if weight_decay:
            param.data = param.data * (1.0 - lr * weight_decay)
        param.data = param.data - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


class AdamW:
    """Optimizer over a fixed list of named parameters"""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], lr: float = 5e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self, lr: Optional[float] = None, prefixes: Optional[Sequence[str]] = None) -> None:
        """Update all parameters, or only those whose name starts with one of ``prefixes``"""
        params = self.params
        if prefixes is not None:
            params = [(n, p) for n, p in params if any(n.startswith(pre) for pre in prefixes)]
        optimizer_step(params, self.state, self.lr if lr is None else lr,
                       betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.zero_grad()


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing that hits lr_max at epoch 0 and lr_min at the final epoch"""
    if total_epochs <= 1:
        return lr_max
    progress = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
