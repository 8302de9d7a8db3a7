"""
Parameter containers.

``Module`` registers parameters, child modules and buffers in assignment
order, so parameter names (``stage1.block0.attn_h.w_q``) and state-dict
order are stable across runs.
"""

from __future__ import annotations

import copy
from typing import Any, Iterator, Mapping

import numpy as np

from protoguard.core.errors import ContractError, DimensionError
from protoguard.tensor.tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor. ``decay=False`` exempts it from weight decay."""

    def __init__(self, data: Any, decay: bool = True) -> None:
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    training: bool

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif name in self._buffers:
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    # Traversal -------------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}{name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def parameter_count(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    # Modes -------------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def astype(self, dtype: Any) -> "Module":
        """Cast parameters and buffers in place (64-bit verification runs)."""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
        for _, module in self.named_modules():
            for name, value in list(module._buffers.items()):
                setattr(module, name, np.asarray(value).astype(dtype))
        return self

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    # State -------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: param.data for name, param in self.named_parameters()}
        state.update({name: np.asarray(value) for name, value in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers; extra keys are ignored."""
        for name, param in self.named_parameters():
            if name not in state:
                raise ContractError(f"Missing parameter '{name}' in state")
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"Parameter '{name}' shape differs", value.shape, param.shape)
            param.data = value.astype(param.data.dtype, copy=True)
        for name, _ in list(self.named_buffers()):
            if name not in state:
                raise ContractError(f"Missing buffer '{name}' in state")
            owner, attr = self._resolve(name)
            current = np.asarray(getattr(owner, attr))
            setattr(owner, attr, np.asarray(state[name]).astype(current.dtype, copy=True))

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        owner: Module = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner._modules[part]
        return owner, attr


class Sequential(Module):
    """Children applied in registration order."""

    def forward(self, x: Tensor) -> Tensor:
        for module in self._modules.values():
            x = module(x)
        return x
