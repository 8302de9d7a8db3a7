"""
Linear probe trained on frozen embeddings; the classifier the attacks target.
"""

from __future__ import annotations

import numpy as np
import structlog

from protoguard.core.errors import ContractError
from protoguard.models.encoder import PAAResNet
from protoguard.models.layers import Linear
from protoguard.models.module import Module, Parameter
from protoguard.tensor import functional as F
from protoguard.tensor.tensor import Tensor, no_grad

logger = structlog.get_logger(__name__)


class ProbeHead(Module):
    def __init__(self, embedding_dim: int, classes: int, rng: np.random.Generator) -> None:
        super().__init__()
        if classes < 2:
            raise ContractError(f"probe needs >= 2 classes, got {classes}")
        self.classes = classes
        self.linear = Linear(embedding_dim, classes, rng)

    def forward(self, v: Tensor) -> Tensor:
        return self.linear(v)

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.linear(Tensor(embeddings)).data
        return np.argmax(logits, axis=1)


def train_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    classes: int,
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
) -> ProbeHead:
    """Full-batch gradient descent on cross-entropy over fixed embeddings."""
    probe = ProbeHead(embeddings.shape[1], classes, np.random.default_rng(seed))
    inputs = Tensor(embeddings)
    for epoch in range(epochs):
        probe.zero_grad()
        loss = F.cross_entropy(probe(inputs), labels)
        loss.backward()
        for param in probe.parameters():
            param.data = param.data - lr * param.grad
    accuracy = float(np.mean(probe.predict(embeddings) == labels))
    logger.info("Probe trained", epochs=epochs, loss=round(loss.item(), 4), train_accuracy=accuracy)
    return probe


class ProbeClassifier:
    """``probe(encoder(x))`` with the encoder frozen in eval mode."""

    def __init__(self, encoder: PAAResNet, probe: ProbeHead) -> None:
        self.encoder = encoder
        self.probe = probe
        self.classes = probe.classes
        encoder.eval()

    def logits(self, x: Tensor) -> Tensor:
        return self.probe(self.encoder(x))

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.probe.parameters()

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.argmax(self.logits(Tensor(x)).data, axis=1)
