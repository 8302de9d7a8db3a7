"""
SGD with momentum and decoupled-from-BN weight decay, plus the step schedule.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from protoguard.core.errors import ContractError
from protoguard.models.module import Parameter
from protoguard.schemas.config import TrainConfig


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    """LR of 1-indexed ``epoch``: one ``lr_factor`` drop per milestone already passed."""
    drops = sum(1 for milestone in config.milestones if epoch > milestone)
    return config.lr * config.lr_factor**drops


class SGD:
    """``buf = momentum * buf + (grad + wd * p)``; ``p -= lr * buf``.

    Parameters created with ``decay=False`` (batch-norm affine terms,
    relative-position tables) skip weight decay.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> None:
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue
            if param.grad.shape != param.shape:
                raise ContractError(f"gradient shape {param.grad.shape} != parameter {param.shape}")
            grad = param.grad.astype(param.data.dtype, copy=False)
            if self.weight_decay and param.decay:
                grad = grad + self.weight_decay * param.data
            buffer = self._buffers[index]
            buffer = grad.copy() if buffer is None else self.momentum * buffer + grad
            self._buffers[index] = buffer
            param.data = (param.data - self.lr * buffer).astype(param.data.dtype)

