"""Dense float64 tensors and the tape that records them for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("wsdefseg_tape", default=None)


class Tensor:
    """An immutable float64 array with an optional gradient buffer.

    Only tensors created while a :class:`Tape` is active take part in differentiation;
    outside a tape every op result is a constant.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar, resolved lazily to avoid an import cycle with ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(other, self)

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """One recorded op: its inputs, its output and how to push gradients back."""

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule
    op: str


class Tape:
    """Records differentiable ops in execution order.

    A tape belongs to one thread of execution. Activate it with ``with Tape() as tape:``;
    the recording is a valid topological order because an op can only consume tensors
    that already exist.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule, op: str) -> None:
        self.nodes.append(Node(inputs, output, backward, op))

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate d(output) back to every leaf tensor that requires grad.

        Leaf gradients accumulate into ``Tensor.grad``. Each node is visited once, in
        reverse recording order; fan-out contributions add up.
        """
        if seed is None:
            if output.size != 1:
                raise ShapeError(f"backward needs a scalar output or an explicit seed, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=np.float64)}
        produced = {id(node.output) for node in self.nodes}
        leaves: dict[int, Tensor] = {}
        if output.requires_grad and id(output) not in produced:
            leaves[id(output)] = output

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for tensor, tg in zip(node.inputs, input_grads):
                if tg is None or not tensor.requires_grad:
                    continue
                if tg.shape != tensor.shape:
                    raise ShapeError(f"{node.op}: gradient shape {tg.shape} != input shape {tensor.shape}")
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + tg
                else:
                    grads[key] = tg
                if key not in produced:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        logger.debug("backward over %d nodes reached %d leaves", len(self.nodes), len(leaves))


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def make_result(
    data: np.ndarray,
    inputs: Iterable[Tensor],
    backward: BackwardRule,
    op: str,
) -> Tensor:
    """Wrap an op's output, check it is finite and record it on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced non-finite values")
    inputs = tuple(inputs)
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(inputs, out, backward, op)
    return out
