"""
Result records written by training, evaluation and the harness commands.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator

from protoguard.schemas.config import AttackSpec
from protoguard.schemas.enums import Verdict, verdict_mapper


class DetectionResult(BaseModel):
    score: float = Field(..., description="Max cosine similarity to any prototype")
    threshold: float
    verdict: Verdict

    model_config = ConfigDict(frozen=True)

    @field_validator("verdict", mode="before")
    @classmethod
    def parse_verdict(cls, value: Any) -> Any:
        return verdict_mapper.to_enum(value)


class EpochMetrics(BaseModel):
    """One line of the metrics stream."""

    epoch: int
    lr: float
    warmup: bool
    loss_total: float
    loss_pm: float
    loss_pce: float = Field(..., description="lambda_pce * L_PCE contribution")
    loss_icl: float = Field(..., description="lambda_icl * L_ICL contribution")
    steps: int
    skipped_anchors: int = Field(default=0, description="ICL anchors without bank entries")
    gamma_min: Optional[float] = None
    gamma_mean: Optional[float] = None
    gamma_max: Optional[float] = None
    bank_occupancy: List[int] = Field(default_factory=list)


class TrainingSummary(BaseModel):
    epochs: int
    checkpoint: str
    inference_export: str
    metrics: str
    final_loss: float


class ScoreSummary(BaseModel):
    mean: float
    std: float
    quantiles: Dict[str, float]
    histogram: List[int]
    bin_edges: List[float]


class AttackRow(BaseModel):
    """Per-attack line of the evaluation report."""

    name: str
    spec: AttackSpec
    dr_attacked: float
    success_rate: float = Field(..., description="Fraction of images whose probe prediction changed")
    converged_rate: float
    auc: float
    mean_linf: float
    mean_l2: float
    scores: ScoreSummary


class EvaluationReport(BaseModel):
    threshold: float
    clean_pass_rate: float
    dr_clean: float
    prototypes: int
    probe_accuracy: float
    clean_scores: ScoreSummary
    attacks: List[AttackRow] = Field(default_factory=list)

    @computed_field  # type: ignore[prop-decorator]
    @property
    def average_dr_attacked(self) -> Optional[float]:
        if not self.attacks:
            return None
        return float(sum(row.dr_attacked for row in self.attacks) / len(self.attacks))

    @computed_field  # type: ignore[prop-decorator]
    @property
    def average_auc(self) -> Optional[float]:
        if not self.attacks:
            return None
        return float(sum(row.auc for row in self.attacks) / len(self.attacks))


class AblationRow(BaseModel):
    name: str
    switch: str
    value: str
    dr_clean: float
    dr_attacked: Optional[float]
    auc: Optional[float]


class AblationReport(BaseModel):
    rows: List[AblationRow]


class BenchRow(BaseModel):
    size: int
    workers: int
    sequential_seconds: float
    concurrent_seconds: float
    identical: bool

    @computed_field  # type: ignore[prop-decorator]
    @property
    def ratio(self) -> float:
        return self.concurrent_seconds / self.sequential_seconds if self.sequential_seconds else 1.0


class GradcheckRow(BaseModel):
    name: str
    max_rel_error: float
    passed: bool
