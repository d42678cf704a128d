"""
Reverse-mode differentiation over numpy arrays.

A :class:`GradientTape` records every operation applied to tensors derived from
the leaves it watches. Calling :meth:`GradientTape.backward` on a scalar result
walks the recorded nodes once, newest first, and leaves the adjoints on the
watched leaves. Tensors built from plain arrays are constants and are never
recorded, which is how parameter groups are frozen.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence, Union

import numpy as np

from latentfit.errors import LatentfitError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class TapeError(LatentfitError):
    pass


class Tensor:
    __array_priority__ = 100

    def __init__(
        self,
        value: np.ndarray | float,
        tape: GradientTape | None = None,
        parents: tuple[Tensor, ...] = (),
        backward_fn: BackwardFn | None = None,
        name: str | None = None,
    ) -> None:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self.tape is not None and self.backward_fn is None

    def __repr__(self) -> str:
        kind = "constant" if self.tape is None else ("leaf" if self.is_leaf else "node")
        return f"Tensor({kind}, shape={self.shape}, name={self.name!r})"

    def __add__(self, other: TensorLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: TensorLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: TensorLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: TensorLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: TensorLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: TensorLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float | np.ndarray) -> Tensor:
        if isinstance(other, Tensor):
            raise TapeError("Division is only supported by constants.")
        return mul(self, 1.0 / np.asarray(other, dtype=self.value.dtype))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: TensorLike) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean(self, axis)


TensorLike = Union[Tensor, np.ndarray, float]


class GradientTape:
    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._leaves: list[Tensor] = []
        self._consumed = False
        self.visited = 0

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def watch(self, value: np.ndarray | float, name: str | None = None) -> Tensor:
        """Create a trainable leaf holding a copy of ``value``."""
        if self._consumed:
            raise TapeError("Cannot watch new leaves on a consumed tape.")
        leaf = Tensor(np.array(value, copy=True), tape=self, name=name)
        if leaf.name is None:
            leaf.name = f"leaf{len(self._leaves)}"
        self._leaves.append(leaf)
        return leaf

    def _record(self, node: Tensor) -> None:
        if self._consumed:
            raise TapeError("Cannot record on a consumed tape.")
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.tape is not self:
            raise TapeError("Loss was not recorded on this tape.")
        if loss.size != 1:
            raise TapeError(f"Backward requires a scalar root, got shape {loss.shape}.")
        if self._consumed:
            raise TapeError("Tape has already been consumed by a backward pass.")
        self._consumed = True

        loss.grad = np.ones_like(loss.value)
        self.visited = 0
        for node in reversed(self._nodes):
            self.visited += 1
            grad = node.grad
            if grad is None:
                continue
            parent_grads = node.backward_fn(grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent.tape is None or parent_grad is None:
                    continue
                assert parent_grad.shape == parent.shape, (parent_grad.shape, parent.shape)
                parent.grad = parent_grad if parent.grad is None else parent.grad + parent_grad
            node.grad = None
            node.backward_fn = _consumed_backward

        return {leaf.name: self.gradient_of(leaf) for leaf in self._leaves}

    @staticmethod
    def gradient_of(tensor: Tensor) -> np.ndarray | None:
        """Adjoint of a leaf; ``None`` for constants, zeros for unreached leaves."""
        if tensor.tape is None:
            return None
        if tensor.grad is None:
            return np.zeros_like(tensor.value)
        return tensor.grad


def _consumed_backward(grad: np.ndarray) -> Sequence[None]:
    raise TapeError("Node was already differentiated.")


def as_tensor(x: Tensor | np.ndarray | float) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def apply_op(value: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Record ``value`` as the result of an operation on ``parents``."""
    parents = tuple(parents)
    tapes = {id(p.tape): p.tape for p in parents if p.tape is not None}
    if len(tapes) > 1:
        raise TapeError("Operands belong to different tapes.")
    if not tapes:
        return Tensor(value)
    tape = next(iter(tapes.values()))
    node = Tensor(value, tape=tape, parents=parents, backward_fn=backward_fn)
    tape._record(node)
    return node


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.value + b.value,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.value - b.value,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        a.value * b.value,
        (a, b),
        lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)),
    )


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.value, (a,), lambda g: (-g,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}.")
    return apply_op(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x: TensorLike, weight: TensorLike, bias: TensorLike) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for a batch of row vectors."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"Cannot apply a {weight.shape} layer to input of shape {x.shape}.")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return g @ weight.value, g.T @ x.value, g.sum(axis=0)

    return apply_op(x.value @ weight.value.T + bias.value, (x, weight, bias), backward)


def weight_norm(direction: TensorLike, magnitude: TensorLike, eps: float = 1e-12) -> Tensor:
    r"""
    Effective weights :math:`W_i = g_i v_i / \|v_i\|` for every row :math:`v_i`.
    """
    v, m = as_tensor(direction), as_tensor(magnitude)
    norms = np.sqrt(np.sum(v.value**2, axis=1))
    safe = np.maximum(norms, eps)
    scale = m.value / safe

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        proj = np.sum(g * v.value, axis=1)
        grad_m = proj / safe
        grad_v = scale[:, None] * g
        active = norms > eps
        grad_v[active] -= (m.value * proj / safe**3)[active, None] * v.value[active]
        return grad_v, grad_m

    return apply_op(scale[:, None] * v.value, (v, m), backward)


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    active = x.value > 0
    return apply_op(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return apply_op(y, (x,), lambda g: (g * (1.0 - y**2),))


def abs_(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return apply_op(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return apply_op(x.value**2, (x,), lambda g: (2.0 * g * x.value,))


def clamp(x: TensorLike, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.value > low) & (x.value < high)
    return apply_op(np.clip(x.value, low, high), (x,), lambda g: (g * inside,))


def sum_(x: TensorLike, axis: int | None = None) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(np.sum(x.value, axis=axis), (x,), backward)


def mean(x: TensorLike, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return sum_(x, axis) / float(max(count, 1))


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return list(np.split(g, splits, axis=axis))

    return apply_op(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def reshape(x: TensorLike, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return apply_op(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def repeat_rows(x: TensorLike, n: int) -> Tensor:
    """Stack a vector ``n`` times into an ``(n, dim)`` matrix."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ValueError(f"repeat_rows expects a vector, got shape {x.shape}.")
    value = np.broadcast_to(x.value, (n, x.shape[0])).copy()
    return apply_op(value, (x,), lambda g: (g.sum(axis=0),))


def take_rows(x: TensorLike, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.value)
        np.add.at(grad, index, g)
        return (grad,)

    return apply_op(x.value[index], (x,), backward)


def row_norm(x: TensorLike, eps: float = 1e-12) -> Tensor:
    """Euclidean norm of every row, with a guarded derivative at zero."""
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.value**2, axis=-1))
    safe = np.maximum(norms, eps)
    return apply_op(norms, (x,), lambda g: ((g / safe)[..., None] * x.value,))


def conv3d(x: TensorLike, weight: TensorLike, bias: TensorLike, stride: int = 1, padding: int = 1) -> Tensor:
    """
    Channels-last 3-D convolution.

    ``x`` has shape ``(batch, depth, height, width, in_channels)`` and ``weight``
    has shape ``(k, k, k, in_channels, out_channels)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 5 or weight.ndim != 5 or x.shape[-1] != weight.shape[3]:
        raise ValueError(f"Incompatible conv3d shapes {x.shape} and {weight.shape}.")
    k = weight.shape[0]
    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding), (0, 0))
    padded = np.pad(x.value, pad)
    out_dims = [(n + 2 * padding - k) // stride + 1 for n in x.shape[1:4]]
    if min(out_dims) < 1:
        raise ValueError(f"conv3d input {x.shape[1:4]} is too small for kernel {k}.")

    def window(a: int, b: int, c: int) -> tuple[slice, ...]:
        return (
            slice(None),
            slice(a, a + stride * (out_dims[0] - 1) + 1, stride),
            slice(b, b + stride * (out_dims[1] - 1) + 1, stride),
            slice(c, c + stride * (out_dims[2] - 1) + 1, stride),
            slice(None),
        )

    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    out = np.zeros((x.shape[0], *out_dims, weight.shape[4]), dtype=padded.dtype)
    for a, b, c in offsets:
        out += padded[window(a, b, c)] @ weight.value[a, b, c]
    out += bias.value

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_padded = np.zeros_like(padded)
        grad_weight = np.zeros_like(weight.value)
        flat_g = g.reshape(-1, g.shape[-1])
        for a, b, c in offsets:
            patch = padded[window(a, b, c)]
            grad_weight[a, b, c] = patch.reshape(-1, patch.shape[-1]).T @ flat_g
            grad_padded[window(a, b, c)] += g @ weight.value[a, b, c].T
        inner = tuple(slice(padding, padding + n) for n in x.shape[1:4])
        grad_x = grad_padded[(slice(None), *inner, slice(None))]
        return grad_x, grad_weight, g.sum(axis=(0, 1, 2, 3))

    return apply_op(out, (x, weight, bias), backward)
