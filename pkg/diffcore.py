"""
Dense float64 tensor arithmetic with reverse-mode differentiation.

Every backward rule is written with the same differentiable primitives it
differentiates, so the gradient of a loss is itself a graph. Hessian-vector
products differentiate the scalar g(θ)ᵀv a second time.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from utils import ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray


def as_tensor(data, shape: Optional[tuple] = None) -> Tensor:
    """
    Copy data into a contiguous float64 array.

    Args:
        data: Array-like input
        shape: Optional expected shape

    Returns:
        np.ndarray: float64 copy

    Raises:
        ShapeError: If the shape does not match
    """
    array = np.array(data, dtype=np.float64, copy=True)
    if shape is not None and array.shape != tuple(shape):
        raise ShapeError(f"Expected shape {tuple(shape)}, got {array.shape}")
    return array


# =============================================================================
# GRAPH NODES
# =============================================================================

class Var:
    """A node of the computation graph holding its forward value."""

    __slots__ = ("value", "op", "inputs", "requires_grad", "name")

    def __init__(self, value, op=None, inputs: tuple = (), requires_grad: bool = False, name: str = ""):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or (type(self.op).__name__ if self.op else "const")
        return f"Var({label}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Var):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Var):
            return add(self, -other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(-self, float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Var:
    """Wrap a value as a constant (never differentiated)."""
    return Var(as_tensor(value))


def leaf(value, name: str = "") -> Var:
    """Create a differentiable leaf."""
    return Var(as_tensor(value), requires_grad=True, name=name)


def _apply(op, *inputs: Var) -> Var:
    value = op.forward(*[x.value for x in inputs])
    if not any(x.requires_grad for x in inputs):
        return Var(value)
    return Var(value, op=op, inputs=inputs, requires_grad=True)


# =============================================================================
# PRIMITIVES
# =============================================================================

def _same_shape(a: np.ndarray, b: np.ndarray, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    n, h, w, c = x.shape
    pad = kernel // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    patches = [padded[:, i:i + h, j:j + w, :] for i in range(kernel) for j in range(kernel)]
    return np.stack(patches, axis=3).reshape(n * h * w, kernel * kernel * c)


def _col2im(cols: np.ndarray, kernel: int, shape: tuple) -> np.ndarray:
    n, h, w, c = shape
    pad = kernel // 2
    cols = cols.reshape(n, h, w, kernel * kernel, c)
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    index = 0
    for i in range(kernel):
        for j in range(kernel):
            padded[:, i:i + h, j:j + w, :] += cols[:, :, :, index, :]
            index += 1
    return padded[:, pad:pad + h, pad:pad + w, :].copy()


class Add:
    def forward(self, a, b):
        _same_shape(a, b, "add")
        return a + b

    def backward(self, g, node):
        return g, g


class AddConst:
    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a + self.c

    def backward(self, g, node):
        return (g,)


class Scale:
    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return self.c * a

    def backward(self, g, node):
        return (scale(g, self.c),)


class Mul:
    def forward(self, a, b):
        _same_shape(a, b, "mul")
        return a * b

    def backward(self, g, node):
        a, b = node.inputs
        return mul(g, b), mul(g, a)


class MatMul:
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g, node):
        a, b = node.inputs
        return matmul(g, transpose(b)), matmul(transpose(a), g)


class Transpose:
    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
        return a.T.copy()

    def backward(self, g, node):
        return (transpose(g),)


class Reshape:
    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def forward(self, a):
        if int(np.prod(self.shape)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {self.shape}")
        return a.reshape(self.shape).copy()

    def backward(self, g, node):
        return (reshape(g, node.inputs[0].shape),)


class BroadcastTo:
    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return np.broadcast_to(a, self.shape).copy()
        except ValueError as e:
            raise ShapeError(f"broadcast_to: {e}") from e

    def backward(self, g, node):
        return (sum_to(g, node.inputs[0].shape),)


class SumTo:
    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def forward(self, a):
        return _sum_to(a, self.shape)

    def backward(self, g, node):
        return (broadcast_to(g, node.inputs[0].shape),)


class Tanh:
    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, node):
        return (mul(g, add_const(-mul(node, node), 1.0)),)


class Relu:
    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, g, node):
        step = (node.inputs[0].value > 0).astype(np.float64)
        return (mul(g, Var(step)),)


class Exp:
    def forward(self, a):
        return np.exp(a)

    def backward(self, g, node):
        return (mul(g, node),)


class LogSoftmax:
    """Log-softmax over the last axis."""

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(self, g, node):
        shape = node.shape
        row_total = broadcast_to(sum_to(g, shape[:-1] + (1,)), shape)
        return (add(g, -mul(exp(node), row_total)),)


class Im2Col:
    """Same-padded stride-1 patch extraction on (N, H, W, C) inputs."""

    def __init__(self, kernel: int):
        self.kernel = kernel

    def forward(self, a):
        if a.ndim != 4:
            raise ShapeError(f"im2col: expected (N, H, W, C), got {a.shape}")
        return _im2col(a, self.kernel)

    def backward(self, g, node):
        return (col2im(g, self.kernel, node.inputs[0].shape),)


class Col2Im:
    """Adjoint of Im2Col."""

    def __init__(self, kernel: int, shape: tuple):
        self.kernel = kernel
        self.shape = tuple(shape)

    def forward(self, a):
        return _col2im(a, self.kernel, self.shape)

    def backward(self, g, node):
        return (im2col(g, self.kernel),)


# =============================================================================
# FUNCTIONAL API
# =============================================================================

def add(a: Var, b: Var) -> Var:
    return _apply(Add(), a, b)


def add_const(a: Var, c: float) -> Var:
    return _apply(AddConst(c), a)


def scale(a: Var, c: float) -> Var:
    return _apply(Scale(c), a)


def mul(a: Var, b: Var) -> Var:
    return _apply(Mul(), a, b)


def matmul(a: Var, b: Var) -> Var:
    return _apply(MatMul(), a, b)


def transpose(a: Var) -> Var:
    return _apply(Transpose(), a)


def reshape(a: Var, shape: tuple) -> Var:
    return _apply(Reshape(shape), a)


def broadcast_to(a: Var, shape: tuple) -> Var:
    return _apply(BroadcastTo(shape), a)


def sum_to(a: Var, shape: tuple) -> Var:
    return _apply(SumTo(shape), a)


def sum_all(a: Var) -> Var:
    return sum_to(a, ())


def tanh(a: Var) -> Var:
    return _apply(Tanh(), a)


def relu(a: Var) -> Var:
    return _apply(Relu(), a)


def exp(a: Var) -> Var:
    return _apply(Exp(), a)


def log_softmax(a: Var) -> Var:
    return _apply(LogSoftmax(), a)


def im2col(a: Var, kernel: int) -> Var:
    return _apply(Im2Col(kernel), a)


def col2im(a: Var, kernel: int, shape: tuple) -> Var:
    return _apply(Col2Im(kernel, shape), a)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "tanh": tanh,
    "relu": relu,
    "linear": lambda x: x,
}


def conv2d(x: Var, weight: Var) -> Var:
    """
    Same-padded stride-1 convolution.

    Args:
        x: Input of shape (N, H, W, C)
        weight: Kernel of shape (K, K, C, F)

    Returns:
        Var: Output of shape (N, H, W, F)
    """
    n, h, w, c = x.shape
    k, k2, c_in, filters = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {weight.shape[:2]}")
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    cols = im2col(x, k)
    out = matmul(cols, reshape(weight, (k * k * c, filters)))
    return reshape(out, (n, h, w, filters))


def mean_pool(x: Var) -> Var:
    """Global average pool of (N, H, W, C) down to (N, C)."""
    n, h, w, c = x.shape
    pooled = sum_to(x, (n, 1, 1, c))
    return scale(reshape(pooled, (n, c)), 1.0 / (h * w))


def softmax_cross_entropy(logits: Var, labels: np.ndarray, temperature: float = 1.0) -> Var:
    """
    Mean cross-entropy of softmax(logits / temperature) against integer labels.

    Args:
        logits: (N, classes) scores
        labels: (N,) class indices
        temperature: Divisor applied to logits before the softmax

    Returns:
        Var: Scalar mean loss
    """
    n, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"cross-entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    log_probs = log_softmax(scale(logits, 1.0 / temperature))
    return scale(sum_all(mul(log_probs, Var(onehot))), -1.0 / n)


# =============================================================================
# PARAMETER VECTORS
# =============================================================================

class GradientVector:
    """
    Named float64 arrays mirroring a parameter set.

    Flattening follows insertion order (layer-major) and row-major order
    within each array.
    """

    def __init__(self, arrays: dict):
        self.arrays: dict[str, np.ndarray] = {name: as_tensor(value) for name, value in arrays.items()}

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def shapes(self) -> dict[str, tuple]:
        return {name: value.shape for name, value in self.arrays.items()}

    @property
    def size(self) -> int:
        return sum(value.size for value in self.arrays.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value):
        self.arrays[name] = as_tensor(value, self.arrays[name].shape)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def items(self):
        return self.arrays.items()

    def copy(self) -> "GradientVector":
        return GradientVector(self.arrays)

    def zeros_like(self) -> "GradientVector":
        return GradientVector({name: np.zeros_like(value) for name, value in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([value.ravel() for value in self.arrays.values()])

    def unflatten(self, flat) -> "GradientVector":
        """Build a vector with this one's layout from a flat array."""
        flat = as_tensor(flat)
        if flat.shape != (self.size,):
            raise ShapeError(f"unflatten: expected {self.size} values, got {flat.shape}")
        arrays, offset = {}, 0
        for name, value in self.arrays.items():
            arrays[name] = flat[offset:offset + value.size].reshape(value.shape)
            offset += value.size
        return GradientVector(arrays)

    def check_layout(self, other: "GradientVector", opname: str = "vector op"):
        if self.shapes != other.shapes or self.names != other.names:
            raise ShapeError(f"{opname}: layouts differ ({self.shapes} vs {other.shapes})")

    def _combine(self, other, fn) -> "GradientVector":
        if isinstance(other, GradientVector):
            self.check_layout(other)
            return GradientVector({n: fn(v, other.arrays[n]) for n, v in self.arrays.items()})
        return GradientVector({n: fn(v, float(other)) for n, v in self.arrays.items()})

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self) -> str:
        return f"GradientVector({self.shapes})"


def dot(a: GradientVector, b: GradientVector) -> float:
    """
    Inner product in the deterministic flattening order.

    Raises:
        ShapeError: If the layouts differ
    """
    a.check_layout(b, "dot")
    return float(np.dot(a.flatten(), b.flatten()))


# =============================================================================
# GRAPHS
# =============================================================================

@dataclass
class Tape:
    """One traced evaluation of a Graph."""
    nodes: list
    leaves: dict
    output: Var


class Graph:
    """
    A scalar-valued function of named parameters.

    Args:
        build: Maps a dict of leaf Vars to the output Var
        shapes: Expected parameter shapes, in flattening order
    """

    def __init__(self, build: Callable[[dict], Var], shapes: dict):
        self.build = build
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}

    def trace(self, params: GradientVector) -> Tape:
        if params.shapes != self.shapes:
            raise ShapeError(f"Graph expects parameters {self.shapes}, got {params.shapes}")
        leaves = {name: leaf(value, name) for name, value in params.items()}
        output = self.build(leaves)
        if not isinstance(output, Var):
            output = const(output)
        return Tape(nodes=_topological_order(output), leaves=leaves, output=output)


def _topological_order(output: Var) -> list:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _require_scalar(output: Var):
    if output.shape != ():
        raise ShapeError(f"Graph output must be a scalar, got shape {output.shape}")


def backward(output: Var, wrt: Iterable[Var], create_graph: bool = False) -> list:
    """
    Reverse sweep from a scalar output.

    Args:
        output: Scalar Var
        wrt: Vars to differentiate with respect to
        create_graph: Keep the gradient differentiable

    Returns:
        list: One gradient Var per entry of wrt, or None where unreachable
    """
    _require_scalar(output)
    wrt = list(wrt)
    if not output.requires_grad:
        return [None] * len(wrt)

    grads = {id(output): Var(np.ones(()))}
    for node in reversed(_topological_order(output)):
        g = grads.get(id(node))
        if g is None or node.op is None:
            continue
        for parent, pg in zip(node.inputs, node.op.backward(g, node)):
            if pg is None or not parent.requires_grad:
                continue
            if not create_graph:
                pg = Var(pg.value)
            current = grads.get(id(parent))
            grads[id(parent)] = pg if current is None else add(current, pg)
    return [grads.get(id(x)) for x in wrt]


def _collect(tape: Tape, grads: list) -> GradientVector:
    return GradientVector({
        name: (g.value if g is not None else np.zeros(var.shape))
        for (name, var), g in zip(tape.leaves.items(), grads)
    })


def evaluate(graph: Graph, params: GradientVector) -> float:
    """
    Evaluate L(θ).

    Raises:
        ShapeError: On a parameter shape mismatch or non-scalar output
    """
    tape = graph.trace(params)
    _require_scalar(tape.output)
    return float(tape.output.value)


def value_and_grad(graph: Graph, params: GradientVector) -> tuple[float, GradientVector]:
    tape = graph.trace(params)
    grads = backward(tape.output, tape.leaves.values())
    return float(tape.output.value), _collect(tape, grads)


def grad(graph: Graph, params: GradientVector) -> GradientVector:
    """∂L/∂θ for every parameter."""
    return value_and_grad(graph, params)[1]


def value_grad_hvp(graph: Graph, params: GradientVector,
                   v: Optional[GradientVector] = None) -> tuple[float, GradientVector, GradientVector]:
    """
    L, g and H·v from a single trace. v defaults to g, giving H·g.

    Returns:
        tuple: (loss, gradient, Hessian-vector product)
    """
    tape = graph.trace(params)
    leaves = list(tape.leaves.values())
    first = backward(tape.output, leaves, create_graph=True)
    gradient = _collect(tape, first)
    if v is None:
        v = gradient
    else:
        gradient.check_layout(v, "hvp")

    projection = None
    for g, name in zip(first, tape.leaves):
        if g is None:
            continue
        term = sum_all(mul(g, Var(v[name])))
        projection = term if projection is None else add(projection, term)

    if projection is None or not projection.requires_grad:
        return float(tape.output.value), gradient, params.zeros_like()
    second = backward(projection, leaves)
    return float(tape.output.value), gradient, _collect(tape, second)


def hvp(graph: Graph, params: GradientVector, v: GradientVector) -> GradientVector:
    """
    Exact Hessian-vector product H(θ)·v.

    Raises:
        ShapeError: If v does not match the parameter layout
    """
    params.check_layout(v, "hvp")
    return value_grad_hvp(graph, params, v)[2]


# =============================================================================
# FINITE-DIFFERENCE ORACLES
# =============================================================================

def fd_step(theta: np.ndarray) -> np.ndarray:
    """Per-component step √(machine epsilon)·(1 + |θᵢ|)."""
    return np.sqrt(np.finfo(np.float64).eps) * (1.0 + np.abs(theta))


def finite_difference_grad(graph: Graph, params: GradientVector) -> GradientVector:
    """Central finite differences of L, one component at a time."""
    flat = params.flatten()
    steps = fd_step(flat)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += steps[i]
        minus[i] -= steps[i]
        h = plus[i] - minus[i]
        out[i] = (evaluate(graph, params.unflatten(plus)) - evaluate(graph, params.unflatten(minus))) / h
    return params.unflatten(out)


def finite_difference_hvp(graph: Graph, params: GradientVector, v: GradientVector,
                          eps: float = 1e-5) -> GradientVector:
    """(grad(θ+εv) − grad(θ−εv)) / 2ε."""
    plus = grad(graph, params + v * eps)
    minus = grad(graph, params - v * eps)
    return (plus - minus) * (1.0 / (2.0 * eps))


def relative_error(a: GradientVector, b: GradientVector) -> float:
    """Max-norm relative error ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)."""
    a.check_layout(b, "relative_error")
    fa, fb = a.flatten(), b.flatten()
    denom = max(np.max(np.abs(fa), initial=0.0), np.max(np.abs(fb), initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.max(np.abs(fa - fb)) / denom)
