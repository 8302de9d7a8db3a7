"""
Elementwise, reduction and shape primitives.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from protoguard.core.errors import ContractError, DimensionError
from protoguard.tensor.tensor import Function, Tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes do not broadcast", a.shape, b.shape) from exc


class Add(Function):
    name = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, self.name)
        self.saved["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sa, sb = self.saved["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    name = "sub"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, self.name)
        self.saved["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        sa, sb = self.saved["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, self.name)
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Function):
    name = "div"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b, self.name)
        self.saved["a"], self.saved["b"] = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        return (
            _unbroadcast(grad / b, a.shape),
            _unbroadcast(-grad * a / (b * b), b.shape),
        )


class Neg(Function):
    name = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (-grad,)


class Exp(Function):
    name = "exp"

    def forward(self, a: np.ndarray) -> np.ndarray:
        out = np.exp(a)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.saved["out"],)


class Relu(Function):
    name = "relu"

    def forward(self, a: np.ndarray) -> np.ndarray:
        mask = a > 0
        self.saved["mask"] = mask
        return np.where(mask, a, np.zeros((), dtype=a.dtype))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(self.saved["mask"], grad, np.zeros((), dtype=grad.dtype)),)


class Tanh(Function):
    name = "tanh"

    def forward(self, a: np.ndarray) -> np.ndarray:
        out = np.tanh(a)
        self.saved["out"] = out
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = self.saved["out"]
        return (grad * (1 - out * out),)


def _normalize_axes(axis: Any, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    name = "sum"

    def forward(self, a: np.ndarray) -> np.ndarray:
        axes = _normalize_axes(self.attrs.get("axis"), a.ndim)
        self.saved["shape"], self.saved["axes"] = a.shape, axes
        return np.asarray(a.sum(axis=axes, keepdims=self.attrs.get("keepdims", False)))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        shape, axes = self.saved["shape"], self.saved["axes"]
        if not self.attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape),)


class Max(Function):
    name = "max"

    def forward(self, a: np.ndarray) -> np.ndarray:
        axis = self.attrs["axis"] % a.ndim
        index = np.expand_dims(np.argmax(a, axis=axis), axis)
        self.saved["shape"], self.saved["axis"], self.saved["index"] = a.shape, axis, index
        out = np.take_along_axis(a, index, axis=axis)
        return out if self.attrs.get("keepdims", False) else np.squeeze(out, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        axis = self.saved["axis"]
        if not self.attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        full = np.zeros(self.saved["shape"], dtype=grad.dtype)
        np.put_along_axis(full, self.saved["index"], grad, axis=axis)
        return (full,)


class Reshape(Function):
    name = "reshape"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"] = a.shape
        try:
            return a.reshape(self.attrs["shape"])
        except ValueError as exc:
            raise DimensionError(
                "reshape: element count differs", a.shape, tuple(self.attrs["shape"])
            ) from exc

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.saved["shape"]),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a: np.ndarray) -> np.ndarray:
        axes = self.attrs.get("axes") or tuple(reversed(range(a.ndim)))
        self.saved["axes"] = axes
        return np.transpose(a, axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, np.argsort(self.saved["axes"])),)


class GetItem(Function):
    name = "getitem"

    def forward(self, a: np.ndarray) -> np.ndarray:
        self.saved["shape"], self.saved["dtype"] = a.shape, a.dtype
        return a[self.attrs["index"]]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(self.saved["shape"], dtype=self.saved["dtype"])
        np.add.at(full, self.attrs["index"], grad)
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        axis = self.attrs.get("axis", 0)
        self.saved["sizes"] = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as exc:
            raise DimensionError(
                "concat: shapes differ off the concatenation axis",
                *(a.shape for a in arrays),
            ) from exc

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        cuts = np.cumsum(self.saved["sizes"])[:-1]
        return tuple(np.split(grad, cuts, axis=self.attrs.get("axis", 0)))


class MatMul(Function):
    name = "matmul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError("matmul: inner dimensions differ", a.shape, b.shape)
        self.saved["a"], self.saved["b"] = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)


def _parse_einsum(subscripts: str) -> tuple[str, str, str]:
    try:
        inputs, output = subscripts.replace(" ", "").split("->")
        left, right = inputs.split(",")
    except ValueError as exc:
        raise ContractError(
            f"einsum needs explicit 'ab,bc->ac' form with two operands, got '{subscripts}'"
        ) from exc
    for operand in (left, right, output):
        if len(set(operand)) != len(operand):
            raise ContractError(f"einsum: repeated index in '{operand}'")
    for operand, other in ((left, right), (right, left)):
        missing = set(operand) - set(output) - set(other)
        if missing:
            raise ContractError(
                f"einsum: index {sorted(missing)} of '{operand}' is summed on its own"
            )
    return left, right, output


class Einsum(Function):
    name = "einsum"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        left, right, output = _parse_einsum(self.attrs["subscripts"])
        if a.ndim != len(left) or b.ndim != len(right):
            raise DimensionError(
                f"einsum '{self.attrs['subscripts']}': operand ranks differ", a.shape, b.shape
            )
        self.saved["a"], self.saved["b"] = a, b
        self.saved["terms"] = (left, right, output)
        try:
            return np.einsum(self.attrs["subscripts"], a, b, optimize=True)
        except ValueError as exc:
            raise DimensionError(
                f"einsum '{self.attrs['subscripts']}': extents differ", a.shape, b.shape
            ) from exc

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.saved["a"], self.saved["b"]
        left, right, output = self.saved["terms"]
        grad_a = np.einsum(f"{output},{right}->{left}", grad, b, optimize=True)
        grad_b = np.einsum(f"{output},{left}->{right}", grad, a, optimize=True)
        return grad_a, grad_b


# Functional wrappers ------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(a, b)


def neg(a: Any) -> Tensor:
    return Neg.apply(a)


def exp(a: Any) -> Tensor:
    return Exp.apply(a)


def relu(a: Any) -> Tensor:
    return Relu.apply(a)


def tanh(a: Any) -> Tensor:
    return Tanh.apply(a)


def sum(a: Any, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def max(a: Any, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Max.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes) if axes else None)


def getitem(a: Any, index: Any) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def matmul(a: Any, b: Any) -> Tensor:
    return MatMul.apply(a, b)


def einsum(subscripts: str, a: Any, b: Any) -> Tensor:
    """Two-operand einsum with explicit output subscripts."""
    return Einsum.apply(a, b, subscripts=subscripts)
