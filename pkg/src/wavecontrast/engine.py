"""Dense-tensor engine with reverse-mode gradients.

Design constraints that shape this module:

* Determinism: the tape stores executed ops in forward order and replays
  them in exact reverse order, so gradient accumulation order is fixed by
  the forward pass alone.  Identical seed + identical op sequence gives
  bit-identical outputs and gradients.
* Precision: float32 is the training dtype, float64 the verification dtype
  (used by the finite-difference checks).  Ops preserve the dtype of their
  inputs; mixing dtypes in one op is an error.
* Every produced value must be finite; NaN/Inf aborts immediately.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward or backward value came out NaN or Inf."""


def _check_finite(data: np.ndarray, context: str) -> None:
    if data.size and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {context}")


class Tensor:
    """A dense n-dimensional array plus the bookkeeping for backprop.

    ``_backward`` is a closure that routes the tensor's accumulated
    gradient into its parents; it is invoked by :meth:`Tape.backward` in
    reverse execution order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[], None]] = None,
        _context: str = "tensor",
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, _context)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Callers hand over freshly-computed arrays, so taking ownership on
        # first accumulation is safe.
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named, trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True, _context=f"parameter {name!r}")
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


_ACTIVE_TAPE: Optional["Tape"] = None
_GRAD_CORRUPTION = False


def set_gradient_corruption(enabled: bool) -> None:
    """Debug switch: deliberately skew parameter gradients.

    Exists so the finite-difference checker can prove it catches wrong
    gradients. Never enable during real training.
    """
    global _GRAD_CORRUPTION
    _GRAD_CORRUPTION = bool(enabled)


class Tape:
    """Ordered record of executed ops.

    Used as a context manager: ops executed inside record themselves here
    whenever their output requires a gradient.  Replaying the record in
    exact reverse execution order yields deterministic accumulation.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, params: Iterable[Parameter] = ()) -> Dict[str, np.ndarray]:
        """Reverse-mode sweep from a scalar loss.

        Returns gradients keyed by parameter name; parameters that never
        entered the forward computation get exact zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        params = list(params)
        # Clear stale accumulators from any previous sweep.
        for node in self._nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        for p in params:
            p.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward()
        grads: Dict[str, np.ndarray] = {}
        for p in params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                _check_finite(p.grad, f"gradient of {p.name!r}")
                g = p.grad
            if _GRAD_CORRUPTION:
                g = g * 1.01 + np.asarray(0.001, dtype=g.dtype)
            grads[p.name] = g
        return grads


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[], None],
    context: str,
) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=parents, _backward=backward, _context=context)
    tape = _ACTIVE_TAPE
    if tape is not None and requires:
        tape.record(out)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"mixed dtypes in one op: {dt} vs {t.data.dtype}; cast inputs explicitly"
            )
    return dt
