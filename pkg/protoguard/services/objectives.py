"""
Training objectives: InfoNCE, pixel mapping (PM), prototype-wise contrastive
estimation (PCE), instance-wise contrastive learning over the bank (ICL) and
their weighted total.

Anchors are Tensors and carry gradients; prototypes, bank entries and
negatives are plain arrays and act as constants. Natural log throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import structlog

from protoguard.core.errors import ConfigurationError, ContractError, DimensionError
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.tensor import Tensor

logger = structlog.get_logger(__name__)

# Additive mask for logits excluded from a denominator; exp() of it underflows to 0.
_EXCLUDED = -1e9

# A loss term: a Tensor while it carries gradients, a float when the term is inactive.
LossValue = Tensor | float


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {tau}")


def _constant(array: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(array), dtype=like.dtype)


def _normalize_rows(array: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(array, axis=-1, keepdims=True)
    return np.divide(array, norms, out=np.zeros_like(array), where=norms > 0)


def pm_terms(v_t: Tensor, v_s: Tensor, tau: float) -> Tensor:
    """Per-anchor pixel-mapping terms ``[B]``.

    Term ``i`` is ``-log softmax_b(v_b^t . v_i^s / tau)`` evaluated at ``b = i``.
    """
    _check_tau(tau)
    if v_t.shape != v_s.shape or v_t.ndim != 2:
        raise DimensionError("pm_loss: views are not row-aligned", v_t.shape, v_s.shape)
    logits = ops.matmul(v_s, ops.transpose(v_t)) * (1.0 / tau)
    diagonal = np.arange(v_t.shape[0])
    return -F.log_softmax(logits, axis=1)[diagonal, diagonal]


def pm_loss(v_t: Tensor, v_s: Tensor, tau: float) -> Tensor:
    if v_t.shape[0] < 2:
        logger.warning("Degenerate batch for pixel-mapping loss", batch_size=v_t.shape[0])
    return ops.mean(pm_terms(v_t, v_s, tau))


def infonce_loss(
    v: Tensor, positives: Tensor | np.ndarray, negatives: np.ndarray, tau: float
) -> Tensor:
    """InfoNCE with the positive and ``r`` negatives in the denominator.

    ``negatives`` is either shared ``[r, D]`` or per anchor ``[n, r, D]``.
    """
    _check_tau(tau)
    positives = positives if isinstance(positives, Tensor) else _constant(positives, v)
    if positives.shape != v.shape:
        raise DimensionError("infonce_loss: anchors and positives differ", v.shape, positives.shape)
    n = v.shape[0]
    positive_logit = ops.reshape(ops.sum(v * positives, axis=1), (n, 1))
    negatives = np.asarray(negatives, dtype=v.dtype)
    if negatives.ndim == 2:
        negative_logits = ops.matmul(v, _constant(negatives.T, v))
    elif negatives.ndim == 3 and negatives.shape[0] == n:
        negative_logits = ops.einsum("nd,nrd->nr", v, _constant(negatives, v))
    else:
        raise DimensionError("infonce_loss: negatives must be [r, D] or [n, r, D]", negatives.shape)
    logits = ops.concat([positive_logit, negative_logits], axis=1) * (1.0 / tau)
    return ops.mean(-F.log_softmax(logits, axis=1)[:, 0])


def concentration(members: np.ndarray, prototype: np.ndarray, beta: float) -> float:
    """``sum ||p - v_i|| / (n log(n + beta))`` over the cluster members."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    n = members.shape[0] if members.size else 0
    if n == 0:
        raise ContractError("concentration of an empty cluster is undefined")
    if beta <= 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    distances = np.linalg.norm(members - np.asarray(prototype, dtype=np.float64), axis=1)
    return float(distances.sum() / (n * np.log(n + beta)))


def prototype_negative_mask(
    assignments: np.ndarray,
    prototypes: int,
    negatives: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Boolean ``[n, M]`` mask of the negative prototypes of every anchor.

    All other prototypes are negatives unless ``negatives`` asks for fewer,
    in which case that many are sampled per anchor.
    """
    if prototypes < 2:
        raise ContractError("prototype contrast needs at least one negative prototype")
    n = assignments.shape[0]
    mask = np.ones((n, prototypes), dtype=bool)
    mask[np.arange(n), assignments] = False
    if negatives is not None and negatives < prototypes - 1:
        rng = rng or np.random.default_rng(0)
        sampled = np.zeros_like(mask)
        for i in range(n):
            pool = np.flatnonzero(mask[i])
            sampled[i, rng.choice(pool, size=negatives, replace=False)] = True
        mask = sampled
    return mask


def pce_loss(
    v: Tensor,
    assignments: np.ndarray,
    prototypes: np.ndarray,
    gammas: np.ndarray,
    negative_mask: np.ndarray | None = None,
    include_positive: bool = True,
    gamma_min: float = 1e-3,
) -> Tensor:
    """Prototype-wise contrastive estimation with per-prototype concentration.

    Args:
        v: Anchor embeddings ``[n, D]``.
        assignments: Positive prototype id of each anchor.
        prototypes: Centroids ``[M, D]``.
        gammas: Concentrations ``[M]``; floored at ``gamma_min``.
        negative_mask: ``[n, M]`` negatives per anchor; all others by default.
        include_positive: Keep the positive term in the denominator.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    prototypes = np.asarray(prototypes)
    if prototypes.ndim != 2 or prototypes.shape[1] != v.shape[1]:
        raise DimensionError("pce_loss: prototype/anchor dims differ", prototypes.shape, v.shape)
    m = prototypes.shape[0]
    if negative_mask is None:
        negative_mask = prototype_negative_mask(assignments, m)
    if not negative_mask.any(axis=1).all():
        raise ContractError("pce_loss: an anchor has an empty negative set")

    scale = 1.0 / np.maximum(np.asarray(gammas, dtype=np.float64), gamma_min)
    logits = ops.matmul(v, _constant(prototypes.T, v)) * _constant(scale[None, :], v)

    n = v.shape[0]
    denominator = negative_mask.copy()
    if include_positive:
        denominator[np.arange(n), assignments] = True
    masked = logits + _constant(np.where(denominator, 0.0, _EXCLUDED), v)
    positive = logits[np.arange(n), assignments]
    return ops.mean(F.logsumexp(masked, axis=1) - positive)


@dataclass
class ICLResult:
    loss: Tensor
    skipped: int


def icl_loss(
    v: Tensor,
    contrastive_sets: Sequence[np.ndarray],
    positive_index: Sequence[int],
    anchor_prototypes: np.ndarray,
    phi: np.ndarray,
) -> ICLResult:
    """Instance-wise contrastive loss against each anchor's bank.

    ``contrastive_sets[i]`` holds the bank vectors anchor ``i`` is contrasted
    with, including its own representation at ``positive_index[i]``. The logit
    of a member ``z`` is ``cos(v, z) * cos(v, p) / phi`` with ``p`` the anchor's
    prototype. Anchors with an empty set are skipped and counted.
    """
    b = v.shape[0]
    if len(contrastive_sets) != b or len(positive_index) != b:
        raise ContractError("icl_loss: one contrastive set and positive index per anchor")
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(phi <= 0):
        raise ContractError("icl_loss: phi must be positive")

    active = np.array([i for i, members in enumerate(contrastive_sets) if len(members)], dtype=np.int64)
    skipped = b - active.size
    if skipped:
        logger.warning("ICL anchors skipped: empty contrastive set", skipped=skipped)
    if active.size == 0:
        return ICLResult(Tensor(0.0, dtype=v.dtype), skipped)

    dim = v.shape[1]
    width = max(len(contrastive_sets[i]) for i in active)
    members = np.zeros((active.size, width, dim))
    valid = np.zeros((active.size, width), dtype=bool)
    for row, i in enumerate(active):
        entries = np.asarray(contrastive_sets[i]).reshape(-1, dim)
        members[row, : len(entries)] = _normalize_rows(entries)
        valid[row, : len(entries)] = True
    targets = np.asarray(positive_index, dtype=np.int64)[active]
    if np.any(targets < 0) or np.any(targets >= valid.sum(axis=1)):
        raise ContractError("icl_loss: positive index outside the contrastive set")

    anchors = F.l2_normalize(v[active])
    protos = _normalize_rows(np.asarray(anchor_prototypes, dtype=np.float64)[active])
    cos_members = ops.einsum("bd,bkd->bk", anchors, _constant(members, v))
    cos_proto = ops.reshape(ops.sum(anchors * _constant(protos, v), axis=1), (active.size, 1))
    logits = cos_members * cos_proto * _constant((1.0 / phi[active])[:, None], v)
    masked = logits + _constant(np.where(valid, 0.0, _EXCLUDED), v)
    positive = logits[np.arange(active.size), targets]
    return ICLResult(ops.mean(F.logsumexp(masked, axis=1) - positive), skipped)


def total_loss(
    pm: LossValue, pce: LossValue, icl: LossValue, lambda_pce: float, lambda_icl: float
) -> LossValue:
    """``pm + lambda_pce * pce + lambda_icl * icl``; inactive terms may be plain floats."""
    return pm + lambda_pce * pce + lambda_icl * icl
