"""
Detection evaluation and adversarial-set materialization.

Prototypes come from the training split, the threshold from the validation
split and the attacked images from the test split. The attack target is a
linear probe trained on frozen training-split embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import structlog

from protoguard.core.errors import ContractError
from protoguard.models.checkpoint import load_checkpoint, restore_encoder
from protoguard.models.encoder import PAAResNet
from protoguard.models.probe import ProbeClassifier, ProbeHead, train_probe
from protoguard.schemas.config import AttackSpec, ExperimentConfig
from protoguard.schemas.enums import Split
from protoguard.schemas.results import AttackRow, EvaluationReport
from protoguard.services.attacks import AttackOutcome, build_attack, perturbation_norms, predict
from protoguard.services.dataset import ImageDataset, quantize, write_image
from protoguard.services.detector import (
    calibrate_threshold,
    detection_rate,
    embed_images,
    roc_auc,
    score_embeddings,
    summarize_scores,
)
from protoguard.services.prototypes import PrototypeSet, build_prototypes
from protoguard.tensor.serialization import save_tensor

logger = structlog.get_logger(__name__)

REPORT_FILE = "report.json"
EMBEDDINGS_FILE = "embeddings.ten"
EMBEDDINGS_INDEX = "embeddings.csv"
MANIFEST_FILE = "manifest.csv"


@dataclass
class DetectionContext:
    """Everything evaluation needs once the encoder is fixed."""

    config: ExperimentConfig
    encoder: PAAResNet
    prototypes: PrototypeSet
    probe: ProbeHead
    classifier: ProbeClassifier
    threshold: float
    clean_pass_rate: float
    test: ImageDataset
    test_embeddings: np.ndarray
    clean_scores: np.ndarray
    probe_accuracy: float


def prepare_context(
    config: ExperimentConfig,
    encoder: PAAResNet,
    dataset: ImageDataset,
    clean_pass_rate: float,
) -> DetectionContext:
    encoder.eval()
    batch = config.attack.batch_size
    train = dataset.split(Split.TRAIN)
    val = dataset.split(Split.VAL)
    test = dataset.split(Split.TEST).head(config.attack.eval_images)
    if not len(train):
        raise ContractError("no training images to build prototypes from")
    if not len(test):
        raise ContractError("test split is empty")

    train_embeddings = embed_images(encoder, train.images, batch)
    prototypes, _ = build_prototypes(train_embeddings, config.bank, config.loss)
    threshold = calibrate_threshold(
        score_embeddings(embed_images(encoder, val.images, batch), prototypes), clean_pass_rate
    )

    probe = train_probe(
        train_embeddings,
        train.labels,
        dataset.classes,
        epochs=config.attack.probe_epochs,
        lr=config.attack.probe_lr,
        seed=config.train.seed,
    )
    test_embeddings = embed_images(encoder, test.images, batch)
    accuracy = float(np.mean(probe.predict(test_embeddings) == test.labels))
    logger.info(
        "Detector calibrated",
        threshold=round(threshold, 6),
        clean_pass_rate=clean_pass_rate,
        prototypes=len(prototypes),
        probe_accuracy=accuracy,
    )
    return DetectionContext(
        config=config,
        encoder=encoder,
        prototypes=prototypes,
        probe=probe,
        classifier=ProbeClassifier(encoder, probe),
        threshold=threshold,
        clean_pass_rate=clean_pass_rate,
        test=test,
        test_embeddings=test_embeddings,
        clean_scores=score_embeddings(test_embeddings, prototypes),
        probe_accuracy=accuracy,
    )


def run_attack(context: DetectionContext, spec: AttackSpec) -> AttackOutcome:
    """Attack the test images batch by batch and stitch the outcomes."""
    attack = build_attack(spec)
    size = context.config.attack.batch_size
    test = context.test
    parts = [
        attack(context.classifier, test.images[start : start + size], test.labels[start : start + size])
        for start in range(0, len(test), size)
    ]
    outcome = AttackOutcome(
        adversarial=np.concatenate([p.adversarial for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
        norm_history=[h for p in parts for h in p.norm_history],
    )
    outcome.original = test.images
    return outcome


def attack_row(context: DetectionContext, spec: AttackSpec) -> AttackRow:
    outcome = run_attack(context, spec)
    attacked_scores = score_embeddings(
        embed_images(context.encoder, outcome.adversarial, context.config.attack.batch_size),
        context.prototypes,
    )
    _, dr_attacked = detection_rate(context.clean_scores, attacked_scores, context.threshold)
    linf, l2 = perturbation_norms(outcome.original, outcome.adversarial)
    success = predict(context.classifier, outcome.adversarial) != context.test.labels
    row = AttackRow(
        name=spec.label,
        spec=spec,
        dr_attacked=dr_attacked,
        success_rate=float(success.mean()),
        converged_rate=float(outcome.converged.mean()),
        auc=roc_auc(context.clean_scores, attacked_scores),
        mean_linf=float(linf.mean()),
        mean_l2=float(l2.mean()),
        scores=summarize_scores(attacked_scores),
    )
    logger.info(
        "Attack evaluated",
        attack=spec.label,
        dr_attacked=round(row.dr_attacked, 4),
        auc=round(row.auc, 4),
        success_rate=round(row.success_rate, 4),
    )
    return row


def evaluate_encoder(
    config: ExperimentConfig,
    encoder: PAAResNet,
    dataset: ImageDataset,
    specs: Sequence[AttackSpec],
    clean_pass_rate: float,
) -> tuple[EvaluationReport, DetectionContext]:
    context = prepare_context(config, encoder, dataset, clean_pass_rate)
    dr_clean = float(np.mean(context.clean_scores >= context.threshold))
    report = EvaluationReport(
        threshold=context.threshold,
        clean_pass_rate=clean_pass_rate,
        dr_clean=dr_clean,
        prototypes=len(context.prototypes),
        probe_accuracy=context.probe_accuracy,
        clean_scores=summarize_scores(context.clean_scores),
        attacks=[attack_row(context, spec) for spec in specs],
    )
    return report, context


def export_embeddings(context: DetectionContext, out: Path) -> None:
    save_tensor(out / EMBEDDINGS_FILE, context.test_embeddings.astype(np.float32))
    pd.DataFrame(
        {
            "row": np.arange(len(context.test)),
            "filename": context.test.filenames,
            "label": context.test.labels,
            "split": context.test.splits,
            "score": context.clean_scores,
        }
    ).to_csv(out / EMBEDDINGS_INDEX, index=False)


def evaluate(
    checkpoint: str | Path,
    dataset: ImageDataset,
    specs: Sequence[AttackSpec],
    clean_pass_rate: float,
    out: str | Path | None = None,
) -> EvaluationReport:
    config, encoder = restore_encoder(load_checkpoint(checkpoint))
    report, context = evaluate_encoder(config, encoder, dataset, specs, clean_pass_rate)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(report.model_dump_json(indent=2), encoding="utf-8")
        export_embeddings(context, out)
        logger.info("Report written", path=str(out / REPORT_FILE))
    return report


def materialize_attacks(
    checkpoint: str | Path,
    dataset: ImageDataset,
    specs: Sequence[AttackSpec],
    out: str | Path,
    clean_pass_rate: float = 0.95,
) -> Path:
    """Write attacked copies of the test images and a manifest CSV."""
    out = Path(out)
    config, encoder = restore_encoder(load_checkpoint(checkpoint))
    context = prepare_context(config, encoder, dataset, clean_pass_rate)
    rows = []
    for index, spec in enumerate(specs):
        outcome = run_attack(context, spec)
        # Norms and success describe the 8-bit files, not the float attack output.
        written = quantize(outcome.adversarial)
        success = predict(context.classifier, written) != context.test.labels
        linf, l2 = perturbation_norms(outcome.original, written)
        folder = out / f"{index:02d}_{spec.label}"
        folder.mkdir(parents=True, exist_ok=True)
        params = json.dumps(spec.model_dump(mode="json", exclude={"algorithm"}), sort_keys=True)
        for i, name in enumerate(context.test.filenames):
            target = folder / name
            write_image(target, written[i])
            rows.append(
                {
                    "original": str(dataset.root / name),
                    "attacked": str(target),
                    "algorithm": spec.label,
                    "params": params,
                    "success": bool(success[i]),
                    "linf": float(linf[i]),
                    "l2": float(l2[i]),
                }
            )
    manifest = out / MANIFEST_FILE
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(
        rows, columns=["original", "attacked", "algorithm", "params", "success", "linf", "l2"]
    ).to_csv(manifest, index=False)
    logger.info("Adversarial set written", path=str(out), images=len(rows))
    return manifest
