"""First-order optimizers over named weight tensors."""

import numpy as np

from mobile_portrait.models import TrainConfig
from mobile_portrait.tensor import Tensor


class Optimizer:
    """Holds per-tensor state keyed by weight name and updates ``Tensor.data`` in place."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.steps = 0

    def step(self, params: list[Tensor], grads: list[np.ndarray]) -> None:
        self.steps += 1
        if self.learning_rate == 0.0:
            return
        for param, grad in zip(params, grads, strict=True):
            update = self.update(param.name or str(param.id), grad.astype(np.float64))
            param.data = (param.data - self.learning_rate * update).astype(np.float32)

    def update(self, key: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @classmethod
    def from_config(cls, cfg: TrainConfig, learning_rate: float | None = None) -> "Optimizer":
        lr = cfg.learning_rate if learning_rate is None else learning_rate
        if cfg.optimizer == "adam":
            return Adam(lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        return SGDMomentum(lr, momentum=cfg.momentum)


class SGDMomentum(Optimizer):
    def __init__(self, learning_rate: float, momentum: float = 0.9):
        super().__init__(learning_rate)
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def update(self, key: str, grad: np.ndarray) -> np.ndarray:
        v = self.momentum * self.velocity.get(key, np.zeros_like(grad)) + grad
        self.velocity[key] = v
        return v


class Adam(Optimizer):
    """Adam with bias-corrected moment estimates."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, key: str, grad: np.ndarray) -> np.ndarray:
        m = self.beta1 * self.m.get(key, np.zeros_like(grad)) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(key, np.zeros_like(grad)) + (1 - self.beta2) * grad * grad
        self.m[key], self.v[key] = m, v
        m_hat = m / (1 - self.beta1**self.steps)
        v_hat = v / (1 - self.beta2**self.steps)
        return m_hat / (np.sqrt(v_hat) + self.eps)
