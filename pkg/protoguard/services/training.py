"""
Self-supervised training loop.

Each epoch: refresh prototypes from momentum features (after warm-up), then
per batch select augmentation pairs, encode both views, compute the active
loss terms, take an SGD step, update the momentum encoder and enqueue the
batch into the discrimination bank. A checkpoint and a metrics line are
written at the end of every epoch.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog
from tqdm import tqdm

from protoguard.core.errors import ConfigurationError, ContractError, NumericalError
from protoguard.models.checkpoint import (
    MOMENTUM_PREFIX,
    export_inference,
    pack_json,
    save_checkpoint,
)
from protoguard.models.encoder import PAAResNet, build_encoder, momentum_encoder_update
from protoguard.schemas.config import ExperimentConfig
from protoguard.schemas.enums import ContrastiveObjective, LossTerm, PairSelection, Split
from protoguard.schemas.results import EpochMetrics, TrainingSummary
from protoguard.services.augmentation import apply_pairs, sample_candidates, select_pair, select_uniform
from protoguard.services.bank import DiscriminationBank, NegativeQueue
from protoguard.services.dataset import ImageDataset
from protoguard.services.objectives import (
    concentration,
    icl_loss,
    infonce_loss,
    pce_loss,
    pm_loss,
    prototype_negative_mask,
    total_loss,
)
from protoguard.services.optimizer import SGD, learning_rate_at
from protoguard.services.prototypes import PrototypeSet, build_prototypes
from protoguard.tensor.parallel import WorkerPool, use_branch_pool
from protoguard.tensor.tensor import Tensor, no_grad
from protoguard.utils.metrics import MetricsWriter

logger = structlog.get_logger(__name__)

CHECKPOINT_FILE = "checkpoint.paac"
EXPORT_FILE = "encoder.paac"
METRICS_FILE = "metrics.jsonl"


@dataclass
class StepResult:
    pm: float
    pce: float  # weighted contribution
    icl: float  # weighted contribution
    total: float
    skipped: int = 0


@dataclass
class EpochTotals:
    steps: int = 0
    pm: float = 0.0
    pce: float = 0.0
    icl: float = 0.0
    total: float = 0.0
    skipped: int = 0

    def add(self, step: StepResult) -> None:
        self.steps += 1
        self.pm += step.pm
        self.pce += step.pce
        self.icl += step.icl
        self.total += step.total
        self.skipped += step.skipped

    def mean(self, value: float) -> float:
        return value / self.steps if self.steps else 0.0


def _value(term: Tensor | float) -> float:
    return term.item() if isinstance(term, Tensor) else float(term)


class Trainer:
    def __init__(
        self,
        config: ExperimentConfig,
        dataset: ImageDataset,
        out: str | Path,
        workers: int = 1,
        progress: bool | None = None,
    ) -> None:
        self.config = config
        self.out = Path(out)
        self.train_set = dataset.split(Split.TRAIN)
        if len(self.train_set) < 2:
            raise ContractError("training split needs at least two images")
        if self.train_set.image_size != config.train.image_size:
            raise ConfigurationError(
                f"config image_size {config.train.image_size} != dataset {self.train_set.image_size}"
            )
        self.uses_prototypes = config.loss.uses(LossTerm.PCE) or config.loss.uses(LossTerm.ICL)
        if config.loss.uses(LossTerm.PCE) and config.bank.prototypes < 2:
            raise ConfigurationError("prototype contrast needs at least two prototypes")

        self.rng = np.random.default_rng(config.train.seed)
        self.encoder: PAAResNet = build_encoder(config.train)
        self.momentum: PAAResNet = self.encoder.clone()  # type: ignore[assignment]
        self.optimizer = SGD(
            self.encoder.parameters(),
            lr=config.train.lr,
            momentum=config.train.momentum,
            weight_decay=config.train.weight_decay,
        )
        dim = config.train.embedding_dim
        self.bank = DiscriminationBank(config.bank.prototypes, config.bank.capacity, dim)
        self.negatives = NegativeQueue(config.loss.negatives, dim)
        self.prototypes: PrototypeSet | None = None
        self.workers = workers
        self.progress = sys.stderr.isatty() if progress is None else progress
        self.global_step = 0

    # Prototypes ----------------------------------------------------------------

    def momentum_features(self, images: np.ndarray) -> np.ndarray:
        previous = self.momentum.training
        self.momentum.eval()
        try:
            with no_grad():
                chunks = [
                    self.momentum(Tensor(images[start : start + 256])).data
                    for start in range(0, len(images), 256)
                ]
        finally:
            self.momentum.train(previous)
        return np.concatenate(chunks)

    def refresh_prototypes(self) -> PrototypeSet:
        features = self.momentum_features(self.train_set.images)
        self.prototypes, _ = build_prototypes(features, self.config.bank, self.config.loss)
        self.bank.reset()
        return self.prototypes

    def bank_concentrations(self, snapshot: list[np.ndarray]) -> np.ndarray:
        """phi per bank: concentration of its queue around its prototype, floored."""
        assert self.prototypes is not None
        loss = self.config.loss
        phi = np.full(len(snapshot), loss.gamma_min)
        for m, members in enumerate(snapshot):
            if len(members):
                phi[m] = max(concentration(members, self.prototypes.centroids[m], loss.beta), loss.gamma_min)
        return phi

    # One step ----------------------------------------------------------------

    def select_views(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        augment = self.config.augment
        candidates = sample_candidates(augment, self.rng)
        if augment.selection == PairSelection.ADVERSARIAL:
            selected = select_pair(images, candidates, self.encoder, self.config.loss.tau)
        else:
            selected = select_uniform(len(images), candidates, self.rng)
        return apply_pairs(images, selected.pairs)

    def train_step(self, images: np.ndarray, epoch: int, step: int, warmup: bool) -> StepResult:
        cfg = self.config
        loss_cfg = cfg.loss
        views_t, views_s = self.select_views(images)

        self.encoder.train()
        v_t = self.encoder(Tensor(views_t))
        with no_grad():
            z = self.momentum(Tensor(views_s)).data

        contrastive: Tensor | float = 0.0
        if loss_cfg.uses(LossTerm.PM):
            if loss_cfg.contrastive == ContrastiveObjective.INFONCE:
                contrastive = infonce_loss(v_t, z, self.negatives.snapshot(), loss_cfg.tau)
            else:
                v_s = self.encoder(Tensor(views_s))
                contrastive = pm_loss(v_t, v_s, loss_cfg.tau)

        pce: Tensor | float = 0.0
        icl: Tensor | float = 0.0
        skipped = 0
        if not warmup and self.prototypes is not None:
            protos = self.prototypes
            assignments = protos.assign(z)
            if loss_cfg.uses(LossTerm.PCE):
                mask = prototype_negative_mask(
                    assignments, len(protos), negatives=min(loss_cfg.negatives, len(protos) - 1), rng=self.rng
                )
                pce = pce_loss(
                    v_t,
                    assignments,
                    protos.centroids,
                    protos.gammas,
                    negative_mask=mask,
                    include_positive=loss_cfg.pce_positive_in_denominator,
                    gamma_min=loss_cfg.gamma_min,
                )
            if loss_cfg.uses(LossTerm.ICL):
                snapshot = self.bank.snapshot()
                phi = self.bank_concentrations(snapshot)
                sets = [
                    np.vstack([z[i], snapshot[a]]) if len(snapshot[a]) else np.zeros((0, z.shape[1]))
                    for i, a in enumerate(assignments)
                ]
                result = icl_loss(v_t, sets, [0] * len(sets), protos.centroids[assignments], phi[assignments])
                icl, skipped = result.loss, result.skipped
            self.bank.update(z, assignments, batch_id=self.global_step)

        total = total_loss(contrastive, pce, icl, loss_cfg.lambda_pce, loss_cfg.lambda_icl)
        total_value = _value(total)
        if not np.isfinite(total_value):
            self.dump_nan_batch(epoch, step, images, views_t, views_s)
            raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")

        if isinstance(total, Tensor) and total.requires_grad:
            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()
        else:
            logger.warning("No active loss term this step", epoch=epoch, step=step, warmup=warmup)

        momentum_encoder_update(
            self.encoder.parameters(), self.momentum.parameters(), cfg.train.encoder_momentum
        )
        if loss_cfg.contrastive == ContrastiveObjective.INFONCE:
            self.negatives.push(z)
        self.global_step += 1
        return StepResult(
            pm=_value(contrastive),
            pce=loss_cfg.lambda_pce * _value(pce),
            icl=loss_cfg.lambda_icl * _value(icl),
            total=total_value,
            skipped=skipped,
        )

    def dump_nan_batch(
        self, epoch: int, step: int, images: np.ndarray, views_t: np.ndarray, views_s: np.ndarray
    ) -> Path:
        path = self.out / "diagnostics" / f"nan_batch_epoch{epoch}_step{step}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, images=images, views_t=views_t, views_s=views_s)
        logger.error("Non-finite loss, batch dumped", epoch=epoch, step=step, path=str(path))
        return path

    # Epochs ------------------------------------------------------------------

    def run_epoch(self, epoch: int) -> EpochMetrics:
        train = self.config.train
        lr = learning_rate_at(epoch, train)
        self.optimizer.lr = lr
        warmup = epoch <= train.warmup_epochs
        if not warmup and self.uses_prototypes:
            self.refresh_prototypes()

        totals = EpochTotals()
        drop_last = len(self.train_set) >= train.batch_size
        batches = self.train_set.batches(train.batch_size, rng=self.rng, drop_last=drop_last)
        started = time.perf_counter()
        for step, (images, _) in enumerate(
            tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not self.progress)
        ):
            if len(images) < 2:
                continue
            totals.add(self.train_step(images, epoch, step, warmup))

        gammas = self.prototypes.gammas if self.prototypes is not None and not warmup else None
        metrics = EpochMetrics(
            epoch=epoch,
            lr=lr,
            warmup=warmup,
            loss_total=totals.mean(totals.total),
            loss_pm=totals.mean(totals.pm),
            loss_pce=totals.mean(totals.pce),
            loss_icl=totals.mean(totals.icl),
            steps=totals.steps,
            skipped_anchors=totals.skipped,
            gamma_min=float(gammas.min()) if gammas is not None else None,
            gamma_mean=float(gammas.mean()) if gammas is not None else None,
            gamma_max=float(gammas.max()) if gammas is not None else None,
            bank_occupancy=self.bank.occupancy(),
        )
        logger.info(
            "Epoch finished",
            epoch=epoch,
            lr=lr,
            warmup=warmup,
            loss=round(metrics.loss_total, 6),
            seconds=round(time.perf_counter() - started, 3),
        )
        return metrics

    def checkpoint_entries(self, epoch: int) -> dict[str, np.ndarray]:
        entries = {name: value.astype(np.float32) for name, value in self.encoder.state_dict().items()}
        for name, value in self.momentum.state_dict().items():
            entries[f"{MOMENTUM_PREFIX}{name}"] = value.astype(np.float32)
        if self.prototypes is not None:
            entries.update(self.prototypes.state_entries())
        entries.update(self.bank.state_entries())
        entries["meta.config"] = pack_json(self.config.model_dump(mode="json"))
        entries["meta.epoch"] = np.array([epoch], dtype=np.float64)
        return entries

    def run(self) -> TrainingSummary:
        self.out.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(self.out / METRICS_FILE)
        checkpoint = self.out / CHECKPOINT_FILE
        train = self.config.train
        logger.info(
            "Training started",
            epochs=train.epochs,
            variant=train.variant.value,
            images=len(self.train_set),
            parameters=self.encoder.parameter_count(),
            workers=self.workers,
        )
        metrics = None
        with WorkerPool(self.workers) as pool, use_branch_pool(pool if self.workers > 1 else None):
            for epoch in range(1, train.epochs + 1):
                metrics = self.run_epoch(epoch)
                writer.write(metrics)
                save_checkpoint(checkpoint, self.checkpoint_entries(epoch))
        export = export_inference(checkpoint, self.out / EXPORT_FILE)
        assert metrics is not None
        return TrainingSummary(
            epochs=train.epochs,
            checkpoint=str(checkpoint),
            inference_export=str(export),
            metrics=str(writer.path),
            final_loss=metrics.loss_total,
        )


def train(
    config: ExperimentConfig, dataset: ImageDataset, out: str | Path, workers: int = 1
) -> TrainingSummary:
    return Trainer(config, dataset, out, workers=workers).run()
