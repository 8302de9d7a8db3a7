"""
Timing of sequential versus concurrent PAA branch execution.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np
import structlog

from protoguard.core.errors import ConfigurationError, ContractError
from protoguard.models.blocks import PAABlock, PAABlockConfig
from protoguard.models.encoder import VARIANTS
from protoguard.schemas.enums import VariantName
from protoguard.schemas.results import BenchRow
from protoguard.tensor.parallel import WorkerPool, use_branch_pool
from protoguard.tensor.tensor import Tensor, no_grad

logger = structlog.get_logger(__name__)


def bench_block(variant: VariantName | str, size: int, heads: int = 8, seed: int = 0) -> PAABlock:
    """A stride-1 PAA block shaped like the variant's last stage, in eval mode."""
    try:
        width = VARIANTS[VariantName(variant)].widths[-1]
    except ValueError as exc:
        raise ConfigurationError(f"unknown variant '{variant}'") from exc
    cfg = PAABlockConfig(4 * width, width, 4 * width, 1, size, size, heads)
    block = PAABlock(cfg, np.random.default_rng(seed))
    block.eval()
    return block


def _best_time(run: Callable[[], np.ndarray], repeats: int) -> tuple[float, np.ndarray]:
    best, output = float("inf"), np.empty(0)
    for _ in range(repeats):
        start = time.perf_counter()
        output = run()
        best = min(best, time.perf_counter() - start)
    return best, output


def bench_paa(
    variant: VariantName | str = VariantName.XS,
    sizes: Sequence[int] = (16, 32, 64),
    workers: Sequence[int] = (1, 2, 4),
    batch: int = 2,
    repeats: int = 3,
    seed: int = 0,
) -> list[BenchRow]:
    if not sizes or any(size < 1 for size in sizes):
        raise ContractError(f"bench sizes must be positive, got {list(sizes)}")
    if not workers or any(w < 1 for w in workers):
        raise ContractError(f"worker counts must be positive, got {list(workers)}")

    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        block = bench_block(variant, size, seed=seed)
        x = Tensor(rng.standard_normal((batch, block.cfg.in_channels, size, size)))

        def forward() -> np.ndarray:
            with no_grad():
                return block(x).data

        with use_branch_pool(None):
            sequential, reference = _best_time(forward, repeats)
        for count in workers:
            with WorkerPool(count) as pool, use_branch_pool(pool):
                concurrent, output = _best_time(forward, repeats)
            row = BenchRow(
                size=size,
                workers=count,
                sequential_seconds=sequential,
                concurrent_seconds=concurrent,
                identical=bool(np.array_equal(reference, output)),
            )
            logger.info(
                "PAA bench",
                size=size,
                workers=count,
                sequential=round(sequential, 5),
                concurrent=round(concurrent, 5),
                ratio=round(row.ratio, 3),
                identical=row.identical,
            )
            rows.append(row)
    return rows
