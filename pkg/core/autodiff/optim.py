import math
from typing import Iterable, List

import numpy as np

from core.autodiff.tensor import Tensor
from core.errors import ConfigError


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0):
        self.params: List[Tensor] = [p for p in params if p.requires_grad]
        self.lr = lr
        self.base_lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grad(self, p: Tensor) -> np.ndarray:
        if self.weight_decay:
            return p.grad + self.weight_decay * p.values
        return p.grad

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += self._grad(p)
            p.values -= (self.lr * v).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = self._grad(p)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.values -= update.astype(p.dtype)


def build_optimizer(config, params: Iterable[Tensor]) -> Optimizer:
    """Instantiate the optimizer named by an `OptimizerConfig`."""
    if config.name == "sgd":
        return SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    if config.name == "adam":
        return Adam(params, lr=config.lr, betas=tuple(config.betas), weight_decay=config.weight_decay)
    raise ConfigError(f"unknown optimizer '{config.name}'")


def scheduled_lr(base_lr: float, schedule: str, epoch: int, epochs: int) -> float:
    if schedule == "constant" or epochs <= 1:
        return base_lr
    if schedule == "cosine":
        return 0.5 * base_lr * (1 + math.cos(math.pi * epoch / epochs))
    raise ConfigError(f"unknown learning-rate schedule '{schedule}'")
