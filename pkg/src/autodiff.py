"""
Reverse-mode automatic differentiation over numpy arrays.

This module provides the small differentiation engine that the whole
reconstruction pipeline runs on. Trainable state lives in `ParamBlock`
objects; computations are recorded as a graph of `Expr` nodes whose values
are evaluated eagerly when possible and can be re-evaluated with `forward`.
`backward` walks the graph in reverse topological order and accumulates
gradients into every reachable `ParamBlock.grad`.

Custom differentiable operations (the hash-grid lookup, the transmittance
scan, ...) subclass `Op` and are recorded with `apply`.
"""

import itertools
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import NumericalError, StructuralError


logger = logging.getLogger(__name__)

_block_ids = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ParamBlock:
    """
    A dense block of trainable real numbers with a same-shape gradient buffer.

    Parameters:
        values: Initial values; copied into a float64 array.
        name (str): Human-readable name, used as the checkpoint key.
    """

    def __init__(self, values: ArrayLike, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.id = next(_block_ids)
        self.name = name or f"param_{self.id}"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self):
        """Reset the gradient accumulator to exact zeros."""
        self.grad.fill(0.0)

    def assign(self, values: ArrayLike):
        """
        Overwrite the values in place, keeping the shape.

        Raises:
            StructuralError: If the new values have a different shape.
        """
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise StructuralError(
                f"Cannot assign shape {values.shape} to block '{self.name}' of shape {self.values.shape}"
            )
        self.values[...] = values

    def __repr__(self) -> str:
        return f"ParamBlock(name={self.name!r}, shape={self.shape})"


def zero_grads(blocks: Iterable[ParamBlock]):
    """Zero the gradient buffers of all given blocks."""
    for block in blocks:
        block.zero_grad()


class Op:
    """
    Base class of graph operations.

    Subclasses implement `forward(*input_values)` and
    `backward(grad, out, *input_values)`; the latter returns one gradient (or
    None) per input, already reduced to that input's shape.
    """

    kind = "composite"

    def forward(self, *values):
        raise NotImplementedError

    def backward(self, grad, out, *values):
        raise NotImplementedError


class Expr:
    """
    A node of the expression graph.

    Attributes:
        op (Op): The operation producing this node.
        inputs (tuple): Operand nodes.
        value (np.ndarray or None): Cached forward value.
        requires_grad (bool): Whether any ParamBlock is reachable below.
    """

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, op: Op, inputs: Tuple["Expr", ...], value, requires_grad: bool):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad

    @property
    def kind(self) -> str:
        return self.op.kind

    @property
    def shape(self) -> Tuple[int, ...]:
        if self.value is None:
            raise StructuralError("Expression has no value; run forward() first")
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Expr":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Expr":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Expr":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        shape = None if self.value is None else np.shape(self.value)
        return f"Expr(op={type(self.op).__name__}, shape={shape})"


# ---------------------------------------------------------------------------
# Leaves


class ParamLeaf(Op):
    kind = "input"

    def __init__(self, block: ParamBlock):
        self.block = block

    def forward(self):
        return self.block.values


class ConstLeaf(Op):
    kind = "input"

    def __init__(self, value: np.ndarray):
        self.value = value

    def forward(self):
        return self.value


class InputLeaf(Op):
    kind = "input"

    def __init__(self, name: str):
        self.name = name
        self.value = None

    def forward(self):
        if self.value is None:
            raise StructuralError(f"Input '{self.name}' is not bound")
        return self.value


def param(block: ParamBlock) -> Expr:
    """Graph leaf reading a ParamBlock; gradients accumulate into it."""
    return Expr(ParamLeaf(block), (), block.values, True)


def constant(value: ArrayLike) -> Expr:
    """Graph leaf holding a fixed array."""
    array = np.asarray(value, dtype=np.float64)
    return Expr(ConstLeaf(array), (), array, False)


def placeholder(name: str) -> Expr:
    """Graph leaf whose value is supplied later with `bind`."""
    return Expr(InputLeaf(name), (), None, False)


def bind(node: Expr, value: ArrayLike):
    """Bind a value to a placeholder leaf."""
    if not isinstance(node.op, InputLeaf):
        raise StructuralError("Only placeholder leaves can be bound")
    node.op.value = np.asarray(value, dtype=np.float64)
    node.value = node.op.value


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, ParamBlock):
        return param(value)
    return constant(value)


def detach(node: Expr) -> Expr:
    """A constant leaf holding the current value of `node`."""
    return constant(node.value)


def value_of(node) -> np.ndarray:
    if isinstance(node, Expr):
        return node.value
    return np.asarray(node, dtype=np.float64)


def apply(op: Op, *inputs) -> Expr:
    """
    Record `op` applied to `inputs`, evaluating it eagerly when every input
    already has a value.
    """
    nodes = tuple(as_expr(i) for i in inputs)
    requires_grad = any(n.requires_grad for n in nodes)
    values = [n.value for n in nodes]
    value = None
    if all(v is not None for v in values):
        value = op.forward(*values)
    return Expr(op, nodes, value, requires_grad)


# ---------------------------------------------------------------------------
# Graph traversal


def _topological_order(root: Expr) -> List[Expr]:
    order = []
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
        for child in node.inputs:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def forward(node: Expr) -> np.ndarray:
    """
    Re-evaluate every node below `node` from its leaves.

    Returns:
        np.ndarray: The value of `node`.

    Raises:
        StructuralError: If a placeholder leaf is unbound.
    """
    for current in _topological_order(node):
        if current.inputs:
            current.value = current.op.forward(*[c.value for c in current.inputs])
        else:
            current.value = current.op.forward()
    return node.value


def backward(node: Expr, seed: Optional[ArrayLike] = None):
    """
    Accumulate d(seed . node)/d(block) into every reachable ParamBlock.grad.

    Parameters:
        node (Expr): Output expression; forward must have run.
        seed: Upstream gradient with the shape of `node`; ones when omitted.

    Raises:
        StructuralError: If forward has not run or the seed shape differs.
    """
    if node.value is None:
        raise StructuralError("backward() called before forward()")
    out_shape = np.shape(node.value)
    if seed is None:
        seed = np.ones(out_shape)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_shape:
        raise StructuralError(f"Seed shape {seed.shape} does not match output shape {out_shape}")
    if not node.requires_grad:
        return

    grads = {id(node): seed}
    for current in reversed(_topological_order(node)):
        grad = grads.pop(id(current), None)
        if grad is None or not current.requires_grad:
            continue
        if isinstance(current.op, ParamLeaf):
            current.op.block.grad += grad
            continue
        if not current.inputs:
            continue
        input_grads = current.op.backward(grad, current.value, *[c.value for c in current.inputs])
        for child, child_grad in zip(current.inputs, input_grads):
            if child_grad is None or not child.requires_grad:
                continue
            key = id(child)
            if key in grads:
                grads[key] = grads[key] + child_grad
            else:
                grads[key] = child_grad


def finite_difference_check(
    fn: Callable[[], Expr],
    block: ParamBlock,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """
    Compare analytic gradients of a scalar function against central differences.

    Parameters:
        fn: Zero-argument callable building the scalar expression from the
            current parameter values.
        block (ParamBlock): Block whose coordinates are perturbed.
        step (float): Central-difference step; must be positive.
        indices: Optional subset of flat coordinates to check.

    Returns:
        float: max |analytic - numeric| / max(1, |numeric|) over the checked coordinates.

    Raises:
        NumericalError: If fn returns a non-finite value.
    """
    if step <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}")

    def evaluate() -> float:
        value = float(np.asarray(value_of(fn())).reshape(()))
        if not np.isfinite(value):
            raise NumericalError("Function under finite-difference check returned a non-finite value")
        return value

    block.zero_grad()
    out = fn()
    if isinstance(out, Expr):
        evaluate_value = float(np.asarray(out.value).reshape(()))
        if not np.isfinite(evaluate_value):
            raise NumericalError("Function under finite-difference check returned a non-finite value")
        backward(out)
    analytic = block.grad.reshape(-1).copy()

    flat = block.values.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        original = flat[i]
        flat[i] = original + step
        plus = evaluate()
        flat[i] = original - step
        minus = evaluate()
        flat[i] = original
        numeric = (plus - minus) / (2.0 * step)
        error = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, error)
    logger.debug(f"Finite-difference check on '{block.name}': max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# Elementwise and structural operations


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Add(Op):
    kind = "affine"

    def forward(self, a, b):
        return a + b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, np.shape(a)), _unbroadcast(grad, np.shape(b))


class Sub(Op):
    kind = "affine"

    def forward(self, a, b):
        return a - b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad, np.shape(a)), _unbroadcast(-grad, np.shape(b))


class Mul(Op):
    kind = "affine"

    def forward(self, a, b):
        return a * b

    def backward(self, grad, out, a, b):
        return _unbroadcast(grad * b, np.shape(a)), _unbroadcast(grad * a, np.shape(b))


class Div(Op):
    kind = "elementwise"

    def forward(self, a, b):
        return a / b

    def backward(self, grad, out, a, b):
        grad_a = grad / b
        return _unbroadcast(grad_a, np.shape(a)), _unbroadcast(-grad_a * out, np.shape(b))


class Neg(Op):
    kind = "affine"

    def forward(self, a):
        return -a

    def backward(self, grad, out, a):
        return (-grad,)


class Power(Op):
    kind = "elementwise"

    def __init__(self, exponent: float):
        self.exponent = exponent

    def forward(self, a):
        return a ** self.exponent

    def backward(self, grad, out, a):
        return (grad * self.exponent * a ** (self.exponent - 1),)


class MatMul(Op):
    kind = "affine"

    def forward(self, a, b):
        if np.ndim(a) < 2 or np.ndim(b) < 2:
            raise StructuralError("matmul operands must be at least 2-D")
        return np.matmul(a, b)

    def backward(self, grad, out, a, b):
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(grad_a, np.shape(a)), _unbroadcast(grad_b, np.shape(b))


class Einsum(Op):
    kind = "affine"

    def __init__(self, subscripts: str):
        if "->" not in subscripts:
            raise StructuralError("einsum subscripts must be explicit (contain '->')")
        lhs, self.output = subscripts.replace(" ", "").split("->")
        self.operands = lhs.split(",")
        for sub in self.operands:
            if len(set(sub)) != len(sub):
                raise StructuralError(f"Repeated index within one operand is not supported: {sub}")
        self.subscripts = subscripts.replace(" ", "")

    def forward(self, *values):
        return np.einsum(self.subscripts, *values)

    def backward(self, grad, out, *values):
        grads = []
        for k, target in enumerate(self.operands):
            others = [s for j, s in enumerate(self.operands) if j != k]
            other_values = [v for j, v in enumerate(values) if j != k]
            available = set(self.output).union(*[set(s) for s in others]) if others else set(self.output)
            kept = "".join(c for c in target if c in available)
            spec = ",".join([self.output] + others) + "->" + kept
            partial = np.einsum(spec, grad, *other_values)
            if kept != target:
                shape = np.shape(values[k])
                expand = [shape[i] if c in available else 1 for i, c in enumerate(target)]
                partial = np.broadcast_to(partial.reshape(expand), shape)
            grads.append(partial)
        return tuple(grads)


class Sum(Op):
    kind = "reduction"

    def __init__(self, axis=None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad, out, a):
        shape = np.shape(a)
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % len(shape) for ax in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape),)


class Reshape(Op):
    kind = "composite"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.reshape(a, self.shape)

    def backward(self, grad, out, a):
        return (np.reshape(grad, np.shape(a)),)


class Transpose(Op):
    kind = "composite"

    def __init__(self, axes):
        self.axes = tuple(axes)
        self.inverse = tuple(np.argsort(self.axes))

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, grad, out, a):
        return (np.transpose(grad, self.inverse),)


class Take(Op):
    kind = "composite"

    def __init__(self, index):
        self.index = index

    def forward(self, a):
        return a[self.index]

    def backward(self, grad, out, a):
        full = np.zeros(np.shape(a))
        if isinstance(self.index, np.ndarray) and self.index.dtype == bool:
            full[self.index] = grad
        else:
            np.add.at(full, self.index, grad)
        return (full,)


class Concat(Op):
    kind = "composite"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *values):
        return np.concatenate(values, axis=self.axis)

    def backward(self, grad, out, *values):
        sizes = [np.shape(v)[self.axis] for v in values]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Stack(Op):
    kind = "composite"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *values):
        return np.stack(values, axis=self.axis)

    def backward(self, grad, out, *values):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(len(values)))


class Relu(Op):
    kind = "elementwise"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad, out, a):
        return (grad * (a > 0),)


class Sigmoid(Op):
    kind = "elementwise"

    def forward(self, a):
        return expit(a)

    def backward(self, grad, out, a):
        return (grad * out * (1.0 - out),)


class Exp(Op):
    kind = "elementwise"

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad, out, a):
        return (grad * out,)


class Log(Op):
    kind = "elementwise"

    def forward(self, a):
        return np.log(a)

    def backward(self, grad, out, a):
        return (grad / a,)


class Sqrt(Op):
    kind = "elementwise"

    def forward(self, a):
        return np.sqrt(a)

    def backward(self, grad, out, a):
        return (grad * 0.5 / out,)


class Clip(Op):
    kind = "elementwise"

    def __init__(self, low: float, high: float):
        self.low = low
        self.high = high

    def forward(self, a):
        return np.clip(a, self.low, self.high)

    def backward(self, grad, out, a):
        inside = (a > self.low) & (a < self.high)
        return (grad * inside,)


class Where(Op):
    kind = "composite"

    def __init__(self, condition: np.ndarray):
        self.condition = np.asarray(condition, dtype=bool)

    def forward(self, a, b):
        return np.where(self.condition, a, b)

    def backward(self, grad, out, a, b):
        grad_a = np.where(self.condition, grad, 0.0)
        grad_b = np.where(self.condition, 0.0, grad)
        return _unbroadcast(grad_a, np.shape(a)), _unbroadcast(grad_b, np.shape(b))


class Norm(Op):
    kind = "reduction"

    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, a):
        return np.sqrt(np.sum(a * a, axis=self.axis))

    def backward(self, grad, out, a):
        n = np.expand_dims(out, self.axis)
        safe = np.where(n > 0, n, 1.0)
        unit = np.where(n > 0, a / safe, 0.0)
        return (np.expand_dims(grad, self.axis) * unit,)


def add(a, b) -> Expr:
    return apply(Add(), a, b)


def sub(a, b) -> Expr:
    return apply(Sub(), a, b)


def mul(a, b) -> Expr:
    return apply(Mul(), a, b)


def div(a, b) -> Expr:
    return apply(Div(), a, b)


def neg(a) -> Expr:
    return apply(Neg(), a)


def power(a, exponent: float) -> Expr:
    return apply(Power(float(exponent)), a)


def square(a) -> Expr:
    a = as_expr(a)
    return mul(a, a)


def matmul(a, b) -> Expr:
    return apply(MatMul(), a, b)


def einsum(subscripts: str, *operands) -> Expr:
    return apply(Einsum(subscripts), *operands)


def affine(x, weight, bias) -> Expr:
    """Row-vector affine map x @ W + b."""
    return add(matmul(x, weight), bias)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Expr:
    return apply(Sum(axis, keepdims), a)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Expr:
    a = as_expr(a)
    shape = np.shape(a.value)
    if axis is None:
        count = int(np.prod(shape)) if shape else 1
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    return div(reduce_sum(a, axis=axis, keepdims=keepdims), float(max(count, 1)))


def reshape(a, shape) -> Expr:
    return apply(Reshape(shape), a)


def transpose(a, axes) -> Expr:
    return apply(Transpose(axes), a)


def take(a, index) -> Expr:
    return apply(Take(index), a)


def concat(parts: Sequence, axis: int = -1) -> Expr:
    return apply(Concat(axis), *parts)


def stack(parts: Sequence, axis: int = 0) -> Expr:
    return apply(Stack(axis), *parts)


def relu(a) -> Expr:
    return apply(Relu(), a)


def sigmoid(a) -> Expr:
    return apply(Sigmoid(), a)


def exp(a) -> Expr:
    return apply(Exp(), a)


def log(a) -> Expr:
    return apply(Log(), a)


def sqrt(a) -> Expr:
    return apply(Sqrt(), a)


def clip(a, low: float, high: float) -> Expr:
    return apply(Clip(low, high), a)


def where(condition: np.ndarray, a, b) -> Expr:
    return apply(Where(condition), a, b)


def norm(a, axis: int = -1) -> Expr:
    """Euclidean norm along `axis`; the gradient at zero is taken as zero."""
    return apply(Norm(axis), a)
