"""
Prototype estimation by density peaks and nearest-prototype assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import structlog
from scipy.spatial.distance import pdist, squareform

from protoguard.core.errors import ContractError, DimensionError
from protoguard.schemas.config import BankConfig, LossConfig
from protoguard.services.objectives import concentration

logger = structlog.get_logger(__name__)


def _unit_rows(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    norms = np.linalg.norm(array, axis=-1, keepdims=True)
    return np.divide(array, norms, out=np.zeros_like(array), where=norms > 0)


@dataclass(frozen=True)
class Prototype:
    id: int
    centroid: np.ndarray
    gamma: float
    member_count: int


@dataclass
class PrototypeSet:
    """Unit-norm centroids ``[M, D]`` with their concentrations."""

    centroids: np.ndarray
    gammas: np.ndarray
    member_counts: np.ndarray

    def __post_init__(self) -> None:
        if self.centroids.ndim != 2 or not len(self.centroids):
            raise ContractError("a prototype set needs at least one [D] centroid")
        if self.gammas.shape != (len(self.centroids),):
            raise DimensionError("one gamma per prototype", self.gammas.shape, self.centroids.shape)

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    def prototypes(self) -> list[Prototype]:
        return [
            Prototype(m, self.centroids[m], float(self.gammas[m]), int(self.member_counts[m]))
            for m in range(len(self))
        ]

    def assign(self, embeddings: np.ndarray) -> np.ndarray:
        return assign(embeddings, self.centroids)

    def similarities(self, embeddings: np.ndarray) -> np.ndarray:
        """Cosine similarity ``[n, M]`` of every embedding to every centroid."""
        return _unit_rows(np.atleast_2d(embeddings)) @ _unit_rows(self.centroids).T

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = {f"proto.{m}": self.centroids[m].astype(np.float32) for m in range(len(self))}
        entries["proto.gamma"] = self.gammas.astype(np.float32)
        entries["proto.count"] = self.member_counts.astype(np.float32)
        return entries

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "PrototypeSet":
        if "proto.gamma" not in entries:
            raise ContractError("checkpoint holds no prototypes")
        gammas = np.asarray(entries["proto.gamma"], dtype=np.float64)
        centroids = np.stack([entries[f"proto.{m}"] for m in range(len(gammas))]).astype(np.float64)
        counts = np.asarray(entries.get("proto.count", np.zeros(len(gammas))), dtype=np.int64)
        return cls(centroids, gammas, counts)


def assign(embeddings: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid by cosine similarity; ties go to the lowest id.

    Accepts one vector (returns a 0-d array) or a batch ``[n, D]``.
    """
    centroids = np.atleast_2d(centroids)
    embeddings = np.asarray(embeddings)
    if not len(centroids):
        raise ContractError("assign needs at least one prototype")
    if embeddings.shape[-1] != centroids.shape[1]:
        raise DimensionError("assign: embedding and prototype dims differ", embeddings.shape, centroids.shape)
    sims = _unit_rows(np.atleast_2d(embeddings)) @ _unit_rows(centroids).T
    choice = np.argmax(sims, axis=1)
    return choice[0] if embeddings.ndim == 1 else choice


def estimate_density_radius(distances: np.ndarray, n: int, fraction: float = 0.02) -> float:
    """Radius giving each point on average ``fraction * n`` neighbours (at least one).

    ``distances`` is the condensed pairwise distance vector.
    """
    if n < 2:
        return 0.0
    share = min(1.0, max(fraction * n, 1.0) / (n - 1))
    return float(np.quantile(distances, share))


@dataclass
class DensityPeaks:
    peaks: np.ndarray  # point index of each prototype, ascending
    rho: np.ndarray
    delta: np.ndarray
    assignments: np.ndarray
    radius: float


def density_peaks(
    embeddings: np.ndarray, m: int, d_c: float | None = None, fraction: float = 0.02
) -> DensityPeaks:
    """Pick ``m`` density peaks and assign every point to the nearest one.

    ``rho`` counts neighbours strictly closer than ``d_c``; ``delta`` is the
    distance to the nearest point ranked denser (rank ties go to the lower
    index), or the largest distance for the top-ranked point. Peaks are the
    top ``m`` by ``rho * delta`` with ties to the lower index.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if not 1 <= m <= n:
        raise ContractError(f"density_peaks needs 1 <= M <= n, got M={m}, n={n}")

    condensed = pdist(embeddings) if n > 1 else np.zeros(0)
    distances = squareform(condensed) if n > 1 else np.zeros((1, 1))
    radius = estimate_density_radius(condensed, n, fraction) if d_c is None else float(d_c)

    close = distances < radius
    np.fill_diagonal(close, False)
    rho = close.sum(axis=1).astype(np.float64)

    order = np.lexsort((np.arange(n), -rho))
    delta = np.empty(n)
    delta[order[0]] = distances[order[0]].max()
    for rank in range(1, n):
        i = order[rank]
        delta[i] = distances[i, order[:rank]].min()

    score = rho * delta
    peaks = np.sort(np.lexsort((np.arange(n), -score))[:m])
    assignments = assign(embeddings, embeddings[peaks])
    return DensityPeaks(peaks, rho, delta, assignments, radius)


def build_prototypes(
    features: np.ndarray, bank: BankConfig, loss: LossConfig
) -> tuple[PrototypeSet, np.ndarray]:
    """Density-peak prototypes of ``features`` with floored concentrations.

    Centroids are the re-normalized member means. Clusters that end up empty
    take the median concentration of the populated ones.
    """
    features = np.asarray(features, dtype=np.float64)
    m = min(bank.prototypes, len(features))
    if m < bank.prototypes:
        logger.warning("Fewer features than prototypes", features=len(features), requested=bank.prototypes)
    result = density_peaks(features, m, fraction=bank.density_fraction)

    centroids = _unit_rows(features[result.peaks])
    counts = np.bincount(result.assignments, minlength=m)
    gammas = np.full(m, np.nan)
    for k in range(m):
        members = features[result.assignments == k]
        if len(members):
            centroids[k] = _unit_rows(members.mean(axis=0))
            gammas[k] = concentration(members, centroids[k], loss.beta)
    populated = ~np.isnan(gammas)
    gammas[~populated] = np.median(gammas[populated])
    gammas = np.maximum(gammas, loss.gamma_min)

    logger.info(
        "Prototypes built",
        prototypes=m,
        radius=round(result.radius, 6),
        gamma_min=float(gammas.min()),
        gamma_max=float(gammas.max()),
        empty=int((~populated).sum()),
    )
    return PrototypeSet(centroids, gammas, counts), result.assignments
