"""
One-at-a-time ablations around a base configuration.

Each grid entry changes a single setting of the base config, trains a fresh
encoder and evaluates it with the base attack list. A base row comes first;
the untrained encoder is appended as the null-detector reference.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterator

import pandas as pd
import structlog

from protoguard.core.errors import ContractError
from protoguard.models.encoder import build_encoder
from protoguard.schemas.config import AblationGrid, ExperimentConfig, parse_model
from protoguard.schemas.results import AblationReport, AblationRow, EvaluationReport
from protoguard.services.dataset import ImageDataset
from protoguard.services.evaluation import evaluate_encoder
from protoguard.services.training import Trainer

logger = structlog.get_logger(__name__)

REPORT_FILE = "ablation.json"
TABLE_FILE = "ablation.csv"

# grid field -> (config section, config field)
SWITCHES: dict[str, tuple[str, str]] = {
    "loss_terms": ("loss", "terms"),
    "paa_blocks": ("train", "paa_blocks"),
    "tau": ("loss", "tau"),
    "beta": ("loss", "beta"),
    "lambda_pce": ("loss", "lambda_pce"),
    "lambda_icl": ("loss", "lambda_icl"),
    "contrastive": ("loss", "contrastive"),
    "selection": ("augment", "selection"),
    "attention_layout": ("train", "attention_layout"),
}


def _label(value: Any) -> str:
    if isinstance(value, list):
        return "+".join(str(item) for item in value)
    return str(value)


def variants(config: ExperimentConfig, grid: AblationGrid) -> Iterator[tuple[str, str, ExperimentConfig]]:
    """Yield ``(switch, value, config)`` for every grid entry, validated."""
    base = config.model_dump(mode="json")
    values = grid.model_dump(mode="json")
    for switch, (section, field) in SWITCHES.items():
        for value in values[switch]:
            payload = {name: dict(part) for name, part in base.items()}
            payload[section][field] = value
            yield switch, _label(value), parse_model(ExperimentConfig, payload, source=f"ablation {switch}")


def _row(name: str, switch: str, value: str, report: EvaluationReport) -> AblationRow:
    return AblationRow(
        name=name,
        switch=switch,
        value=value,
        dr_clean=report.dr_clean,
        dr_attacked=report.average_dr_attacked,
        auc=report.average_auc,
    )


def ablate(
    config: ExperimentConfig,
    grid: AblationGrid,
    dataset: ImageDataset,
    out: str | Path,
    workers: int = 1,
) -> AblationReport:
    if grid.is_empty():
        raise ContractError("ablation grid is empty")
    out = Path(out)
    specs = config.attack.specs
    q = config.attack.clean_pass_rate

    plan = [("base", "base", "-", config)]
    plan += [(f"{switch}={value}", switch, value, cfg) for switch, value, cfg in variants(config, grid)]
    logger.info("Ablation started", runs=len(plan), untrained=grid.include_untrained)

    rows = []
    for index, (name, switch, value, cfg) in enumerate(plan):
        trainer = Trainer(cfg, dataset, out / "runs" / f"{index:02d}", workers=workers)
        trainer.run()
        report, _ = evaluate_encoder(cfg, trainer.encoder, dataset, specs, q)
        rows.append(_row(name, switch, value, report))
        logger.info("Ablation row", name=name, dr_attacked=rows[-1].dr_attacked, auc=rows[-1].auc)

    if grid.include_untrained:
        report, _ = evaluate_encoder(config, build_encoder(config.train), dataset, specs, q)
        rows.append(_row("untrained", "encoder", "untrained", report))

    result = AblationReport(rows=rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(result.model_dump_json(indent=2), encoding="utf-8")
    pd.DataFrame([row.model_dump() for row in rows]).to_csv(out / TABLE_FILE, index=False)
    logger.info("Ablation written", path=str(out / REPORT_FILE))
    return result
