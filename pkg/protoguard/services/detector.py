"""
Prototype-similarity detector.

A sample is scored by the highest cosine similarity between its embedding
and any prototype; it is flagged adversarial when that score falls below a
threshold calibrated on clean validation data.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import structlog
from sklearn.metrics import roc_auc_score

from protoguard.core.errors import ConfigurationError, ContractError
from protoguard.models.encoder import PAAResNet, encode
from protoguard.schemas.enums import Mode, Verdict
from protoguard.schemas.results import DetectionResult, ScoreSummary
from protoguard.services.prototypes import PrototypeSet
from protoguard.tensor.tensor import no_grad

logger = structlog.get_logger(__name__)

MIN_CALIBRATION_SCORES = 100


def score_embeddings(embeddings: np.ndarray, prototypes: PrototypeSet) -> np.ndarray:
    return np.clip(prototypes.similarities(embeddings).max(axis=1), -1.0, 1.0)


def embed_images(
    encoder: PAAResNet, images: np.ndarray, batch_size: int = 50
) -> np.ndarray:
    with no_grad():
        chunks = [
            encode(encoder, images[start : start + batch_size], mode=Mode.EVAL).data
            for start in range(0, len(images), batch_size)
        ]
    return np.concatenate(chunks) if chunks else np.zeros((0, encoder.embedding_dim))


def verdict(score: float, threshold: float) -> Verdict:
    return Verdict.CLEAN if score >= threshold else Verdict.ATTACKED


def detect(
    images: np.ndarray, encoder: PAAResNet, prototypes: PrototypeSet, threshold: float
) -> list[DetectionResult]:
    if not len(prototypes):
        raise ContractError("detect needs at least one prototype")
    scores = score_embeddings(embed_images(encoder, images), prototypes)
    return [
        DetectionResult(score=float(s), threshold=threshold, verdict=verdict(float(s), threshold))
        for s in scores
    ]


def calibrate_threshold(scores: Sequence[float] | np.ndarray, clean_pass_rate: float) -> float:
    """Empirical ``(1 - q)``-quantile of clean scores.

    Index ``floor((1 - q) * n) - 1`` of the sorted scores (at least 0), so
    q = 0.95 on 100 scores returns the 5th smallest.
    """
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    if scores.size < MIN_CALIBRATION_SCORES:
        raise ContractError(
            f"calibration needs >= {MIN_CALIBRATION_SCORES} clean scores, got {scores.size}"
        )
    if not 0 < clean_pass_rate <= 1:
        raise ConfigurationError(f"clean pass rate must be in (0, 1], got {clean_pass_rate}")
    index = max(math.floor((1 - clean_pass_rate) * scores.size + 1e-9) - 1, 0)
    return float(scores[index])


def detection_rate(
    clean_scores: np.ndarray, attacked_scores: np.ndarray, threshold: float
) -> tuple[float, float]:
    """Return ``(DR_clean, DR_attacked)``."""
    clean_scores = np.asarray(clean_scores)
    attacked_scores = np.asarray(attacked_scores)
    if not clean_scores.size or not attacked_scores.size:
        raise ContractError("detection rate needs non-empty clean and attacked sets")
    return float(np.mean(clean_scores >= threshold)), float(np.mean(attacked_scores < threshold))


def roc_auc(clean_scores: np.ndarray, attacked_scores: np.ndarray) -> float:
    """AUC of the score separating clean (positive) from attacked samples."""
    labels = np.concatenate([np.ones(len(clean_scores)), np.zeros(len(attacked_scores))])
    return float(roc_auc_score(labels, np.concatenate([clean_scores, attacked_scores])))


def summarize_scores(scores: np.ndarray, bins: int = 20) -> ScoreSummary:
    scores = np.asarray(scores, dtype=np.float64)
    histogram, edges = np.histogram(scores, bins=bins, range=(-1.0, 1.0))
    quantiles = {f"q{int(p * 100):02d}": float(np.quantile(scores, p)) for p in (0.05, 0.25, 0.5, 0.75, 0.95)}
    return ScoreSummary(
        mean=float(scores.mean()),
        std=float(scores.std()),
        quantiles=quantiles,
        histogram=histogram.tolist(),
        bin_edges=edges.tolist(),
    )
