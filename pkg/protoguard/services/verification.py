"""
Finite-difference gradient suite behind the ``gradcheck`` command.

Every case draws a few random configurations, reduces the function under
test to a scalar with a fixed random weighting and reports the worst
relative error between the analytic and the numeric gradient.
"""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np
import structlog

from protoguard.core.errors import ConfigurationError
from protoguard.models.attention import AxialAttention
from protoguard.models.blocks import PAABlock, PAABlockConfig
from protoguard.models.encoder import VARIANTS, PAAResNet
from protoguard.models.layers import BatchNorm
from protoguard.schemas.enums import AttentionLayout, Axis, VariantName
from protoguard.schemas.results import GradcheckRow
from protoguard.services.objectives import icl_loss, infonce_loss, pce_loss, pm_loss, total_loss
from protoguard.tensor import functional as F
from protoguard.tensor import ops
from protoguard.tensor.gradcheck import GRADCHECK_TOLERANCE, finite_diff_check
from protoguard.tensor.tensor import Tensor, no_grad, precision

logger = structlog.get_logger(__name__)

GradFn = Callable[[Tensor], Tensor]
# A case builds (function, input) for one random configuration.
Case = Callable[[np.random.Generator], tuple[GradFn, np.ndarray]]

SUITES = ("tensor", "losses", "paa")


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


# Tensor primitives ---------------------------------------------------------


def _matmul(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    other = Tensor(rng.standard_normal((4, 3)))
    weights = rng.standard_normal((5, 3))
    return lambda t: ops.sum(ops.matmul(t, other) * Tensor(weights)), rng.standard_normal((5, 4))


def _einsum(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    other = Tensor(rng.standard_normal((2, 4, 3)))
    weights = rng.standard_normal((2, 5, 3))
    return (
        lambda t: ops.sum(ops.einsum("bij,bjk->bik", t, other) * Tensor(weights)),
        rng.standard_normal((2, 5, 4)),
    )


def _softmax(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    weights = rng.standard_normal((3, 6))
    return lambda t: ops.sum(F.softmax_axis(t, axis=1) * Tensor(weights)), 3 * rng.standard_normal((3, 6))


def _log_softmax(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    weights = rng.standard_normal((3, 6))
    return lambda t: ops.sum(F.log_softmax(t, axis=1) * Tensor(weights)), 3 * rng.standard_normal((3, 6))


def _logsumexp(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    weights = rng.standard_normal(4)
    return lambda t: ops.sum(F.logsumexp(t, axis=1) * Tensor(weights)), 3 * rng.standard_normal((4, 5))


def _l2_normalize(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    weights = rng.standard_normal((4, 6))
    return lambda t: ops.sum(F.l2_normalize(t) * Tensor(weights)), rng.standard_normal((4, 6))


def _conv2d(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    kernel = Tensor(rng.standard_normal((3, 2, 3, 3)))
    stride = int(rng.integers(1, 3))
    weights = rng.standard_normal((2, 3, 6 // stride, 6 // stride))
    return (
        lambda t: ops.sum(F.conv2d(t, kernel, stride=stride, pad=1) * Tensor(weights)),
        rng.standard_normal((2, 2, 6, 6)),
    )


def _conv1d(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    kernel = Tensor(rng.standard_normal((4, 3, 3)))
    weights = rng.standard_normal((2, 4, 7))
    return (
        lambda t: ops.sum(F.conv1d(t, kernel, stride=1, pad=1) * Tensor(weights)),
        rng.standard_normal((2, 3, 7)),
    )


def _max_pool2d(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    weights = rng.standard_normal((2, 2, 3, 3))
    # distinct values keep the arg-max away from ties
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) / 10.0
    return lambda t: ops.sum(F.max_pool2d(t, kernel=3, stride=2, pad=1) * Tensor(weights)), x


def _batch_norm(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    layer = BatchNorm(3)
    layer.gamma.data = rng.uniform(0.5, 1.5, 3)
    layer.beta.data = rng.standard_normal(3)
    weights = rng.standard_normal((4, 3, 2, 2))
    return lambda t: ops.sum(layer(t) * Tensor(weights)), rng.standard_normal((4, 3, 2, 2))


# Losses --------------------------------------------------------------------


def _pm(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    b, d = int(rng.integers(2, 6)), 6
    tau = float(rng.uniform(0.1, 1.0))

    def f(t: Tensor) -> Tensor:
        v = F.l2_normalize(t)
        return pm_loss(v[:b], v[b:], tau)

    return f, rng.standard_normal((2 * b, d))


def _infonce(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    n, d, r = 3, 6, int(rng.integers(2, 8))
    positives = _unit_rows(rng, n, d)
    negatives = _unit_rows(rng, r, d)
    tau = float(rng.uniform(0.1, 1.0))
    return lambda t: infonce_loss(F.l2_normalize(t), positives, negatives, tau), rng.standard_normal((n, d))


def _pce(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    n, d, m = 5, 6, int(rng.integers(2, 6))
    prototypes = _unit_rows(rng, m, d)
    gammas = rng.uniform(0.2, 1.0, m)
    assignments = rng.integers(0, m, n)
    include = bool(rng.integers(0, 2))
    return (
        lambda t: pce_loss(F.l2_normalize(t), assignments, prototypes, gammas, include_positive=include),
        rng.standard_normal((n, d)),
    )


def _icl(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    n, d, m = 4, 6, 3
    prototypes = _unit_rows(rng, m, d)
    assignments = rng.integers(0, m, n)
    sets = [np.vstack([_unit_rows(rng, 1, d), _unit_rows(rng, int(rng.integers(0, 4)), d)]) for _ in range(n)]
    phi = rng.uniform(0.2, 1.0, n)

    def f(t: Tensor) -> Tensor:
        return icl_loss(t, sets, [0] * n, prototypes[assignments], phi).loss

    return f, rng.standard_normal((n, d))


# PAA -----------------------------------------------------------------------


def _axial_attention(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    axis = Axis.HEIGHT if rng.integers(0, 2) else Axis.WIDTH
    attention = AxialAttention(4, 4, axis, rng, heads=2)
    x = rng.standard_normal((2, 4, 4, 4))
    weights = rng.standard_normal(x.shape)
    return lambda t: ops.sum(attention(t) * Tensor(weights)), x


def _paa_block(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    layout = AttentionLayout.PARALLEL if rng.integers(0, 2) else AttentionLayout.STACKED
    stride = int(rng.integers(1, 3))
    cfg = PAABlockConfig(8, 2, 8, stride, height=4, width=4, heads=2)
    block = PAABlock(cfg, rng, layout=layout)
    x = rng.standard_normal((2, 8, 4, 4))
    weights = rng.standard_normal((2, 8, 4 // stride, 4 // stride))
    return lambda t: ops.sum(block(t) * Tensor(weights)), x


def _encoder_objective(rng: np.random.Generator) -> tuple[GradFn, np.ndarray]:
    """Tiny XS encoder in train mode feeding the weighted PM + PCE + ICL objective."""
    size, dim, b, m = 8, 8, 2, 3
    encoder = PAAResNet(VARIANTS[VariantName.XS], size, rng, embedding_dim=dim, heads=2, paa_blocks=2)
    encoder.train()
    with no_grad():
        v_s = Tensor(encoder(Tensor(rng.standard_normal((b, 3, size, size)))).data)
    tau = float(rng.uniform(0.1, 1.0))
    prototypes = _unit_rows(rng, m, dim)
    gammas = rng.uniform(0.2, 1.0, m)
    assignments = rng.integers(0, m, b)
    sets = [np.vstack([_unit_rows(rng, 1, dim), _unit_rows(rng, 2, dim)]) for _ in range(b)]
    phi = rng.uniform(0.2, 1.0, b)
    lambda_pce, lambda_icl = rng.uniform(0.5, 2.0, 2)

    def f(t: Tensor) -> Tensor:
        v = encoder(t)
        total = total_loss(
            pm_loss(v, v_s, tau),
            pce_loss(v, assignments, prototypes, gammas),
            icl_loss(v, sets, [0] * b, prototypes[assignments], phi).loss,
            float(lambda_pce),
            float(lambda_icl),
        )
        assert isinstance(total, Tensor)
        return total

    return f, rng.uniform(0.0, 1.0, (b, 3, size, size))


CASES: dict[str, dict[str, Case]] = {
    "tensor": {
        "matmul": _matmul,
        "einsum": _einsum,
        "softmax": _softmax,
        "log_softmax": _log_softmax,
        "logsumexp": _logsumexp,
        "l2_normalize": _l2_normalize,
        "conv2d": _conv2d,
        "conv1d": _conv1d,
        "max_pool2d": _max_pool2d,
        "batch_norm": _batch_norm,
    },
    "losses": {"pm": _pm, "infonce": _infonce, "pce": _pce, "icl": _icl},
    "paa": {"axial_attention": _axial_attention, "paa_block": _paa_block, "encoder": _encoder_objective},
}


def _selected(module: str) -> Iterator[tuple[str, Case]]:
    if module == "all":
        suites: tuple[str, ...] = SUITES
    elif module in CASES:
        suites = (module,)
    else:
        raise ConfigurationError(f"unknown gradcheck module '{module}'; expected all, {', '.join(SUITES)}")
    for suite in suites:
        for name, case in CASES[suite].items():
            yield f"{suite}.{name}", case


def check_case(case: Case, configurations: int = 5, seed: int = 0) -> float:
    """Worst relative error of ``case`` over ``configurations`` random draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision("float64"):
        for _ in range(configurations):
            f, x = case(rng)
            worst = max(worst, finite_diff_check(f, x))
    return worst


def run_gradchecks(module: str = "all", configurations: int = 5, seed: int = 0) -> list[GradcheckRow]:
    rows = []
    for name, case in _selected(module):
        error = check_case(case, configurations, seed)
        row = GradcheckRow(name=name, max_rel_error=error, passed=error < GRADCHECK_TOLERANCE)
        if row.passed:
            logger.info("Gradient check passed", case=name, max_rel_error=error)
        else:
            logger.error("Gradient check failed", case=name, max_rel_error=error)
        rows.append(row)
    return rows
