"""Tensor carrier and the reverse-mode gradient tape."""

import itertools
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, ClassVar, Union

import numpy as np

from mobile_portrait.validation import ContractError, DimensionError

logger = logging.getLogger(__name__)

MAX_RANK = 4

_ids = itertools.count()
_active_tape: ContextVar["GradTape | None"] = ContextVar("active_tape", default=None)

ArrayLike = Union[np.ndarray, float, int, list[Any]]


class Tensor:
    """Dense float32 array of rank at most 4.

    Rank-4 tensors are read as batch x channels x height x width. A tensor
    produced while a GradTape is active, from inputs that require gradients,
    remembers which tape recorded it.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        array = np.asarray(data, dtype=np.float32, order="C")
        if array.ndim > MAX_RANK:
            raise DimensionError("tensor rank exceeds 4", axis="rank", expected=MAX_RANK, actual=array.ndim)
        if array.ndim and min(array.shape) < 1:
            raise DimensionError(f"tensor extents must be >= 1, got {array.shape}", axis="extent")
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._tape_id: int | None = None

    # ============ Introspection ============

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Return the underlying array (not a copy)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut from any tape."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # ============ Operator Sugar ============

    def __add__(self, other: "Tensor | float") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.sub(other, self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.div(self, other)

    def __neg__(self) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.index(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        from mobile_portrait.tensor import functional as F

        return F.permute(self, axes)


def as_tensor(value: "Tensor | ArrayLike") -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


class Function:
    """Base class for recorded primitives.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient array (or None) per tensor input.
    """

    name: ClassVar[str] = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        """Run the forward pass and record it on the active tape, if any."""
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        tape = _active_tape.get()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            tape.record(fn, out)
        return out


@dataclass
class TapeNode:
    """One recorded primitive application."""

    fn: Function
    output: Tensor


class GradTape:
    """Ordered record of primitive applications for reverse-mode replay.

    Use as a context manager; primitives applied inside the block to inputs
    that require gradients are appended in execution order, which is already
    a topological order of the graph.
    """

    _tape_ids = itertools.count()

    def __init__(self) -> None:
        self.id = next(self._tape_ids)
        self.nodes: list[TapeNode] = []
        self._token: Any = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *args: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: Function, output: Tensor) -> None:
        output._tape_id = self.id
        self.nodes.append(TapeNode(fn, output))

    def gradients(self, loss: Tensor, sources: list[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for each source; zeros for unreached sources."""
        grads = backward(self, loss)
        return [grads.get(t.id, np.zeros_like(t.data)) for t in sources]


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Replay ``tape`` in reverse and return gradients keyed by tensor id.

    Every tensor that requires gradients and lies on a path to ``loss`` gets
    exactly one accumulated buffer.

    Raises:
        ContractError: If ``loss`` is not a scalar or the graph contains a
            tensor recorded on a different tape.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss._tape_id != tape.id:
        raise ContractError(
            "loss was not produced on this tape",
            suggestions=["Compute the loss inside the same `with GradTape()` block"],
        )

    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float32)}
    for node in reversed(tape.nodes):
        grad_out = grads.get(node.output.id)
        if grad_out is None:
            continue
        input_grads = node.fn.backward(grad_out)
        for tensor, g in zip(node.fn.inputs, input_grads, strict=True):
            if g is None or not tensor.requires_grad:
                continue
            if tensor._tape_id is not None and tensor._tape_id != tape.id:
                raise ContractError(
                    f"tensor #{tensor.id} feeding '{node.fn.name}' was recorded on another tape"
                )
            g = np.asarray(g, dtype=np.float32).reshape(tensor.shape)
            if tensor.id in grads:
                grads[tensor.id] = grads[tensor.id] + g
            else:
                grads[tensor.id] = g
    logger.debug("Replayed %d tape nodes, %d gradient buffers", len(tape.nodes), len(grads))
    return grads
