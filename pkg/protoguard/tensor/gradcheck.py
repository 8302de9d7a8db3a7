"""
Finite-difference verification of analytic gradients.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from protoguard.core.errors import ContractError
from protoguard.tensor.tensor import Tensor, no_grad, precision

GRADCHECK_TOLERANCE = 1e-4


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-6,
    floor: float = 1e-3,
) -> float:
    """Compare the backward pass of ``f`` at ``x`` with central differences.

    Runs in 64-bit precision. The relative error of each coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the floor keeps
    coordinates with vanishing gradient from amplifying round-off.

    Returns:
        The largest relative error over all coordinates of ``x``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision("float64"):
        probe = Tensor(base.copy(), requires_grad=True)
        loss = f(probe)
        if loss.size != 1:
            raise ContractError(f"gradcheck needs a scalar function, got shape {loss.shape}")
        loss.backward(inputs=[probe])
        analytic = np.asarray(probe.grad, dtype=np.float64).reshape(-1)

        numeric = np.empty_like(analytic)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                upper = f(Tensor(base.copy())).item()
                flat[i] = original - h
                lower = f(Tensor(base.copy())).item()
                flat[i] = original
                numeric[i] = (upper - lower) / (2.0 * h)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
