"""
Tensor and Reverse-Mode Differentiation

Minimal dense float64 tensor that records an eager differentiation graph.
It carries exactly what small MLP training and PGD need:
inputs, perturbations, logits, parameters and their gradients.

Shape rules per primitive:
- add / subtract / multiply: operands must have identical shapes. The
  operator overloads (``a + b`` ...) insert an explicit ``broadcast`` first,
  following numpy's right-aligned rule.
- scale: any shape, attribute ``factor`` (a Python float).
- matmul: (n, k) @ (k, m) -> (n, m). Only 2-D operands.
- relu / exp / log / clamp_min: elementwise, any shape.
- sum: attribute ``axis`` (int or None) and ``keepdims``.
- max: attribute ``axis`` (int or None) and ``keepdims``. Gradient goes to the
  lowest index among ties.
- broadcast: attribute ``shape``; the input must broadcast to it under numpy's
  rule (missing leading axes or extent 1).
"""

from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


class PrimitiveKind(str, Enum):
    ADD = "add"
    SUBTRACT = "subtract"
    MULTIPLY = "multiply"
    SCALE = "scale"
    MATMUL = "matmul"
    RELU = "relu"
    EXP = "exp"
    LOG = "log"
    CLAMP_MIN = "clamp_min"
    SUM = "sum"
    MAX = "max"
    BROADCAST = "broadcast"


_ARITY = {
    PrimitiveKind.ADD: 2,
    PrimitiveKind.SUBTRACT: 2,
    PrimitiveKind.MULTIPLY: 2,
    PrimitiveKind.MATMUL: 2,
}


class Tensor:
    """
    Dense n-dimensional float64 array participating in a differentiation graph.

    The data buffer is read-only after construction; only ``grad`` is written,
    and only by ``backward``.
    """

    # numpy defers to our operators instead of broadcasting over the object
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        self._init_from_array(array, requires_grad)

    def _init_from_array(self, array: np.ndarray, requires_grad: bool):
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got shape {list(array.shape)}")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[PrimitiveKind] = None
        self._inputs: Tuple["Tensor", ...] = ()
        self._attrs: Dict[str, Any] = {}

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an array without copying it (the array becomes read-only)."""
        tensor = cls.__new__(cls)
        tensor._init_from_array(np.asarray(array, dtype=np.float64), requires_grad)
        return tensor

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}, op={self._op.value if self._op else None})"

    # ------------------------------------------------------------------
    # Operator overloads
    # ------------------------------------------------------------------

    def __add__(self, other):
        a, b = _broadcast_pair(self, other)
        return apply(PrimitiveKind.ADD, [a, b])

    def __radd__(self, other):
        return _as_tensor(other) + self

    def __sub__(self, other):
        a, b = _broadcast_pair(self, other)
        return apply(PrimitiveKind.SUBTRACT, [a, b])

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply(PrimitiveKind.SCALE, [self], factor=float(other))
        a, b = _broadcast_pair(self, other)
        return apply(PrimitiveKind.MULTIPLY, [a, b])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply(PrimitiveKind.SCALE, [self], factor=-1.0)

    def __matmul__(self, other):
        return apply(PrimitiveKind.MATMUL, [self, _as_tensor(other)])

    def relu(self) -> "Tensor":
        return apply(PrimitiveKind.RELU, [self])

    def exp(self) -> "Tensor":
        return apply(PrimitiveKind.EXP, [self])

    def log(self) -> "Tensor":
        return apply(PrimitiveKind.LOG, [self])

    def clamp_min(self, floor: float) -> "Tensor":
        return apply(PrimitiveKind.CLAMP_MIN, [self], floor=float(floor))

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return apply(PrimitiveKind.SUM, [self], axis=axis, keepdims=keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return apply(PrimitiveKind.MAX, [self], axis=axis, keepdims=keepdims)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return apply(PrimitiveKind.BROADCAST, [self], shape=tuple(shape))

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_pair(a: Any, b: Any) -> Tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return a, b
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Cannot broadcast shapes {list(a.shape)} and {list(b.shape)}")
    if a.shape != target:
        a = a.broadcast_to(target)
    if b.shape != target:
        b = b.broadcast_to(target)
    return a, b


# ======================================================================
# FORWARD
# ======================================================================

def _check_shapes(kind: PrimitiveKind, inputs: Sequence[Tensor], attrs: Dict[str, Any]):
    expected = _ARITY.get(kind, 1)
    if len(inputs) != expected:
        raise ShapeError(f"{kind.value} takes {expected} input(s), got {len(inputs)}")

    if kind in (PrimitiveKind.ADD, PrimitiveKind.SUBTRACT, PrimitiveKind.MULTIPLY):
        a, b = inputs
        if a.shape != b.shape:
            raise ShapeError(f"{kind.value} needs identical shapes, got {list(a.shape)} and {list(b.shape)}")
    elif kind == PrimitiveKind.MATMUL:
        a, b = inputs
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {list(a.shape)} @ {list(b.shape)}")
    elif kind in (PrimitiveKind.SUM, PrimitiveKind.MAX):
        axis = attrs.get("axis")
        if axis is not None and not -len(inputs[0].shape) <= axis < len(inputs[0].shape):
            raise ShapeError(f"{kind.value} axis {axis} out of range for shape {list(inputs[0].shape)}")
    elif kind == PrimitiveKind.BROADCAST:
        shape = tuple(attrs["shape"])
        try:
            if np.broadcast_shapes(inputs[0].shape, shape) != shape:
                raise ValueError
        except ValueError:
            raise ShapeError(f"Cannot broadcast shape {list(inputs[0].shape)} to {list(shape)}")
    elif kind == PrimitiveKind.SCALE and "factor" not in attrs:
        raise ShapeError("scale needs a 'factor' attribute")


def _forward(kind: PrimitiveKind, arrays: Sequence[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    if kind == PrimitiveKind.ADD:
        return arrays[0] + arrays[1]
    if kind == PrimitiveKind.SUBTRACT:
        return arrays[0] - arrays[1]
    if kind == PrimitiveKind.MULTIPLY:
        return arrays[0] * arrays[1]
    if kind == PrimitiveKind.SCALE:
        return arrays[0] * attrs["factor"]
    if kind == PrimitiveKind.MATMUL:
        return arrays[0] @ arrays[1]
    if kind == PrimitiveKind.RELU:
        return np.maximum(arrays[0], 0.0)
    if kind == PrimitiveKind.EXP:
        return np.exp(arrays[0])
    if kind == PrimitiveKind.LOG:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(arrays[0])
    if kind == PrimitiveKind.CLAMP_MIN:
        return np.maximum(arrays[0], attrs["floor"])
    if kind == PrimitiveKind.SUM:
        return np.sum(arrays[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if kind == PrimitiveKind.MAX:
        return np.max(arrays[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))
    if kind == PrimitiveKind.BROADCAST:
        return np.broadcast_to(arrays[0], tuple(attrs["shape"])).copy()
    raise ValueError(f"Unknown primitive: {kind}")


def apply(op_kind: Union[PrimitiveKind, str], inputs: Sequence[Tensor], **attrs) -> Tensor:
    """
    Evaluate one primitive and record it in the graph when any input requires grad.

    Args:
        op_kind: Primitive to apply
        inputs: Operand tensors (never mutated)
        **attrs: Primitive attributes (factor, axis, keepdims, floor, shape)

    Returns:
        Tensor: Result tensor

    Raises:
        ShapeError: If the operands violate the primitive's shape rule
    """
    kind = PrimitiveKind(op_kind)
    inputs = [_as_tensor(t) for t in inputs]
    _check_shapes(kind, inputs, attrs)

    result = _forward(kind, [t.data for t in inputs], attrs)
    out = Tensor._wrap(np.asarray(result, dtype=np.float64))

    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = kind
        out._inputs = tuple(inputs)
        out._attrs = dict(attrs)
    return out


# ======================================================================
# BACKWARD
# ======================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _expand_reduced(grad: np.ndarray, input_shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(grad, (1,) * len(input_shape)), input_shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, input_shape)


def _vjp(node: Tensor, grad: np.ndarray) -> List[Optional[np.ndarray]]:
    kind, attrs = node._op, node._attrs
    arrays = [t.data for t in node._inputs]

    if kind == PrimitiveKind.ADD:
        return [grad, grad]
    if kind == PrimitiveKind.SUBTRACT:
        return [grad, -grad]
    if kind == PrimitiveKind.MULTIPLY:
        return [grad * arrays[1], grad * arrays[0]]
    if kind == PrimitiveKind.SCALE:
        return [grad * attrs["factor"]]
    if kind == PrimitiveKind.MATMUL:
        return [grad @ arrays[1].T, arrays[0].T @ grad]
    if kind == PrimitiveKind.RELU:
        return [grad * (arrays[0] > 0.0)]
    if kind == PrimitiveKind.EXP:
        return [grad * node.data]
    if kind == PrimitiveKind.LOG:
        return [grad / arrays[0]]
    if kind == PrimitiveKind.CLAMP_MIN:
        return [grad * (arrays[0] > attrs["floor"])]
    if kind == PrimitiveKind.SUM:
        return [_expand_reduced(grad, arrays[0].shape, attrs.get("axis"), attrs.get("keepdims", False)).copy()]
    if kind == PrimitiveKind.MAX:
        source = arrays[0]
        axis = attrs.get("axis")
        result = np.zeros_like(source)
        if axis is None:
            result.reshape(-1)[int(np.argmax(source))] = np.reshape(grad, -1)[0]
            return [result]
        # argmax picks the lowest index among ties
        index = np.expand_dims(np.argmax(source, axis=axis), axis)
        upstream = grad if attrs.get("keepdims", False) else np.expand_dims(grad, axis)
        np.put_along_axis(result, index, upstream, axis=axis)
        return [result]
    if kind == PrimitiveKind.BROADCAST:
        return [_unbroadcast(grad, arrays[0].shape)]
    raise ValueError(f"No gradient rule for {kind}")


def _topological_order(root: Tensor) -> List[Tensor]:
    """Nodes requiring grad, each listed after all of its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class GradientMap:
    """
    Gradients keyed by graph-node identity.

    Index with the tensor itself: ``grads[x]`` returns a Tensor shaped like ``x``.
    """

    def __init__(self, grads: Dict[int, np.ndarray], nodes: Dict[int, Tensor]):
        self._grads = grads
        self._nodes = nodes

    def __getitem__(self, tensor: Tensor) -> Tensor:
        key = id(tensor)
        if key not in self._grads or self._nodes.get(key) is not tensor:
            raise KeyError(f"No gradient recorded for {tensor!r}")
        return Tensor._wrap(self._grads[key].copy())

    def __contains__(self, tensor: Tensor) -> bool:
        return self._nodes.get(id(tensor)) is tensor

    def get(self, tensor: Tensor, default=None):
        return self[tensor] if tensor in self else default

    def __len__(self):
        return len(self._grads)


def backward(root: Tensor) -> GradientMap:
    """
    Reverse-mode sweep from a scalar root.

    Gradients are recomputed from scratch on every call, so calling it twice
    on the same graph gives identical results. Leaves that require grad also
    get their ``grad`` field overwritten.

    Args:
        root: Scalar tensor (one element)

    Returns:
        GradientMap: Gradient of root with respect to every node requiring grad

    Raises:
        ShapeError: If root is not scalar
        ValueError: If root is not connected to any tensor requiring grad
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {list(root.shape)}")
    if not root.requires_grad:
        raise ValueError("backward() root is not connected to any tensor that requires grad")

    order = _topological_order(root)
    nodes = {id(node): node for node in order}
    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=np.float64)}

    for node in reversed(order):
        upstream = grads.get(id(node))
        if upstream is None or node._op is None:
            continue
        for parent, contribution in zip(node._inputs, _vjp(node, upstream)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = np.array(contribution, dtype=np.float64)

    for node in order:
        if node._op is None and id(node) in grads:
            node.grad = grads[id(node)].copy()
    return GradientMap(grads, nodes)


def finite_difference_grad(f: Callable[[Tensor], Any], x: Tensor, h: float = 1e-5) -> Tensor:
    """
    Central-difference gradient estimate (f(x + h e_i) - f(x - h e_i)) / 2h.

    Args:
        f: Scalar function of a tensor (may return a Tensor or a float)
        x: Evaluation point
        h: Step

    Returns:
        Tensor: Gradient estimate shaped like x
    """
    base = np.array(x.data, dtype=np.float64)
    estimate = np.zeros_like(base)
    flat = estimate.reshape(-1)

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        flat[i] = (_scalar(f(Tensor(plus))) - _scalar(f(Tensor(minus)))) / (2.0 * h)

    return Tensor._wrap(estimate)


def _scalar(value: Any) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0

