"""
Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an immutable-by-convention array. Operations are
``Function`` subclasses; applying one records a ``Node`` on the output so
``Tape.record`` can rebuild the computation in topological order and run the
backward pass. Gradient contributions reaching the same tensor are combined
with a fixed pairwise reduction, so repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Any, ClassVar, Iterator, Sequence

import numpy as np

from protoguard.core.errors import ConfigurationError, ContractError
from protoguard.tensor.parallel import tree_reduce

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)
_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "dtype", default=np.dtype(np.float32)
)

_PRECISIONS = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Select the floating dtype for tensors created inside the block.

    ``float32`` is the working precision; ``float64`` is the verification
    mode used by gradient checks.
    """
    try:
        dtype = _PRECISIONS[name]
    except KeyError as exc:
        raise ConfigurationError(f"Unknown precision '{name}'") from exc
    token = _DTYPE.set(dtype)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@dataclass(frozen=True)
class Node:
    """Provenance of a computed tensor."""

    fn: "Function"
    inputs: tuple["Tensor", ...]


class Tensor:
    """N-dimensional array with an optional gradient."""

    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # Introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Differentiation -----------------------------------------------------

    def backward(
        self,
        grad: np.ndarray | None = None,
        inputs: Sequence["Tensor"] | None = None,
    ) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Args:
            grad: Seed gradient; defaults to 1 for a single-element loss.
            inputs: Leaves that must end up with a gradient even when they are
                not on the path from this tensor (they receive zeros).
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("Tensor does not require grad")
        Tape.record(self).backward(np.asarray(grad, dtype=self.data.dtype))
        for leaf in inputs or ():
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

    # Operators -----------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from protoguard.tensor import ops

        return ops.neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from protoguard.tensor import ops

        return ops.getitem(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from protoguard.tensor import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from protoguard.tensor import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        from protoguard.tensor import ops

        return ops.max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from protoguard.tensor import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from protoguard.tensor import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def exp(self) -> "Tensor":
        from protoguard.tensor import ops

        return ops.exp(self)

    def relu(self) -> "Tensor":
        from protoguard.tensor import ops

        return ops.relu(self)

    def tanh(self) -> "Tensor":
        from protoguard.tensor import ops

        return ops.tanh(self)


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """One differentiable primitive.

    Subclasses implement ``forward`` on raw arrays (keeping whatever they need
    in ``self.saved``) and ``backward`` returning one gradient per input, or
    ``None`` for inputs that take no gradient. ``forward`` must be free of
    side effects so a tape can be replayed.
    """

    name: ClassVar[str] = "op"

    def __init__(self, **attrs: Any) -> None:
        self.attrs = attrs
        self.saved: dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **attrs: Any) -> Tensor:
        reference = next((x.data.dtype for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(as_tensor(x, dtype=reference) for x in inputs)
        fn = cls(**attrs)
        out = fn.forward(*(t.data for t in tensors))
        result = Tensor(out, dtype=out.dtype)
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result.node = Node(fn, tensors)
        return result


@dataclass(frozen=True)
class TapeEntry:
    index: int
    fn: Function
    inputs: tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Topologically ordered record of the operations producing one output."""

    def __init__(self, entries: list[TapeEntry], leaves: list[Tensor], output: Tensor):
        self.entries = entries
        self.leaves = leaves
        self.output = output

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.inputs):
                    if id(parent) not in visited:
                        stack.append((parent, False))

        entries: list[TapeEntry] = []
        leaves: list[Tensor] = []
        for tensor in order:
            if tensor.node is None:
                leaves.append(tensor)
            else:
                entries.append(
                    TapeEntry(len(entries), tensor.node.fn, tensor.node.inputs, tensor)
                )
        return cls(entries, leaves, output)

    def backward(self, seed: np.ndarray) -> None:
        pending: dict[int, list[np.ndarray]] = {id(self.output): [seed]}
        for entry in reversed(self.entries):
            contributions = pending.pop(id(entry.output), None)
            if not contributions:
                continue
            grad = tree_reduce(contributions)
            input_grads = entry.fn.backward(grad)
            for tensor, input_grad in zip(entry.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                pending.setdefault(id(tensor), []).append(input_grad)

        for leaf in self.leaves:
            contributions = pending.get(id(leaf))
            if not contributions or not leaf.requires_grad:
                continue
            grad = np.array(tree_reduce(contributions), dtype=leaf.data.dtype)
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from the current leaf values."""
        values: dict[int, np.ndarray] = {id(leaf): leaf.data for leaf in self.leaves}
        outputs = []
        for entry in self.entries:
            result = entry.fn.forward(*(values[id(t)] for t in entry.inputs))
            values[id(entry.output)] = result
            outputs.append(result)
        return outputs


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


__all__ = [
    "Tensor",
    "Function",
    "Node",
    "Tape",
    "TapeEntry",
    "as_tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "default_dtype",
]
