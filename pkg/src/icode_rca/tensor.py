"""
Dense float64 tensors with reverse-mode differentiation through a recorded tape.

Every operation is appended to a Tape as a node holding its kind, the ids of its
parent nodes and whatever forward values its backward rule needs. Because a node
can only reference nodes that already exist, the node list is topologically
ordered by construction and backward() is a single reverse sweep.
"""
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from icode_rca.errors import ShapeError, ValidationError

OP_KINDS = (
    "add", "sub", "mul", "scalar_mul", "matmul", "matvec",
    "tanh", "abs", "square", "sum", "mean", "reshape",
)


class Tensor:
    """
    Immutable rank-0, rank-1 or rank-2 array of float64 values.
    - data: read-only numpy array
    - tape: the Tape that produced this tensor, or None for a free constant
    - node: index of the producing node on the tape
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        array = np.array(data, dtype=np.float64)
        if array.ndim > 2:
            raise ShapeError(f"tensors are rank 0, 1 or 2, got shape {array.shape}")
        array.setflags(write=False)
        self.data = array
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, array, tape, node):
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.setflags(write=False)
        tensor.data = array
        tensor.tape = tape
        tensor.node = node
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return np.array(self.data)

    def _binary(self, kind, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        return _tape_for(self, other).forward_op(kind, self, other)

    def __add__(self, other):
        return self._binary("add", other)

    def __sub__(self, other):
        return self._binary("sub", other)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return _tape_for(self).forward_op("scalar_mul", self, scalar=float(other))
        return self._binary("mul", other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(other)
        kind = "matvec" if other.data.ndim == 1 else "matmul"
        return _tape_for(self, other).forward_op(kind, self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"


def _tape_for(*tensors):
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ValidationError("operands belong to different tapes")
    if tapes:
        return next(iter(tapes.values()))
    return Tape()


@dataclass(frozen=True)
class Node:
    kind: str
    parents: tuple
    cache: tuple
    shape: tuple


class GradientSet(Mapping):
    """Gradients keyed by trainable-parameter name, each with its parameter's shape."""

    def __init__(self, grads):
        self._grads = dict(grads)

    def __getitem__(self, name):
        return self._grads[name]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def flat(self):
        # Concatenation in registration order
        if not self._grads:
            return np.zeros(0)
        return np.concatenate([g.data.ravel() for g in self._grads.values()])

    def __repr__(self):
        return f"GradientSet({ {k: v.shape for k, v in self._grads.items()} })"


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _broadcastable(kind, a, b):
    # Equal shapes, or a rank-1 operand added to every row of a rank-2 one
    if a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _fwd_add(a, b):
    _broadcastable("add", a, b)
    return a + b, (b.shape,)


def _fwd_sub(a, b):
    _broadcastable("sub", a, b)
    return a - b, (b.shape,)


def _fwd_mul(a, b):
    _same_shape("mul", a, b)
    return a * b, (a, b)


def _fwd_scalar_mul(a, scalar):
    return a * scalar, (scalar,)


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return a @ b, (a, b)


def _fwd_matvec(a, v):
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec: shapes {a.shape} and {v.shape} are not aligned")
    return a @ v, (a, v)


def _fwd_tanh(a):
    y = np.tanh(a)
    return y, (y,)


def _fwd_abs(a):
    # np.sign(0) == 0 fixes the subgradient at the kink
    return np.abs(a), (np.sign(a),)


def _fwd_square(a):
    return a * a, (a,)


def _fwd_sum(a):
    return np.sum(a), (a.shape,)


def _fwd_mean(a):
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    return np.mean(a), (a.shape,)


def _fwd_reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 2 or int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape), (a.shape,)


def _bwd_add(g, cache):
    (b_shape,) = cache
    gb = g if g.shape == b_shape else g.sum(axis=0)
    return g, gb


def _bwd_sub(g, cache):
    ga, gb = _bwd_add(g, cache)
    return ga, -gb


def _bwd_mul(g, cache):
    a, b = cache
    return g * b, g * a


def _bwd_scalar_mul(g, cache):
    return (g * cache[0],)


def _bwd_matmul(g, cache):
    a, b = cache
    return g @ b.T, a.T @ g


def _bwd_matvec(g, cache):
    a, v = cache
    return np.outer(g, v), a.T @ g


def _bwd_tanh(g, cache):
    (y,) = cache
    return (g * (1.0 - y * y),)


def _bwd_abs(g, cache):
    return (g * cache[0],)


def _bwd_square(g, cache):
    return (2.0 * cache[0] * g,)


def _bwd_sum(g, cache):
    return (np.full(cache[0], float(g)),)


def _bwd_mean(g, cache):
    shape = cache[0]
    return (np.full(shape, float(g) / int(np.prod(shape))),)


def _bwd_reshape(g, cache):
    return (g.reshape(cache[0]),)


_FORWARD = {
    "add": _fwd_add, "sub": _fwd_sub, "mul": _fwd_mul, "scalar_mul": _fwd_scalar_mul,
    "matmul": _fwd_matmul, "matvec": _fwd_matvec, "tanh": _fwd_tanh, "abs": _fwd_abs,
    "square": _fwd_square, "sum": _fwd_sum, "mean": _fwd_mean, "reshape": _fwd_reshape,
}

_BACKWARD = {
    "add": _bwd_add, "sub": _bwd_sub, "mul": _bwd_mul, "scalar_mul": _bwd_scalar_mul,
    "matmul": _bwd_matmul, "matvec": _bwd_matvec, "tanh": _bwd_tanh, "abs": _bwd_abs,
    "square": _bwd_square, "sum": _bwd_sum, "mean": _bwd_mean, "reshape": _bwd_reshape,
}


class Tape:
    """
    Records operations in execution order. A tape belongs to one thread;
    independent tapes share nothing and can run concurrently.
    """

    def __init__(self):
        self.nodes = []
        self.variables = {}

    def _record(self, kind, parents, cache, value):
        self.nodes.append(Node(kind, tuple(parents), cache, value.shape))
        return Tensor._wrap(value, self, len(self.nodes) - 1)

    def constant(self, data):
        value = data.data if isinstance(data, Tensor) else np.array(data, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeError(f"tensors are rank 0, 1 or 2, got shape {value.shape}")
        return self._record("leaf", (), (), value)

    def variable(self, name, data):
        """Register a trainable parameter and return its tensor on this tape."""
        if name in self.variables:
            raise ValidationError(f"parameter '{name}' is already registered on this tape")
        tensor = self.constant(data)
        self.variables[name] = tensor.node
        return tensor

    def _adopt(self, tensor):
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise ValidationError("operand belongs to a different tape")
        return self.constant(tensor)

    def forward_op(self, kind, *inputs, **params):
        if kind not in _FORWARD:
            raise ValidationError(f"unknown operation '{kind}', expected one of {OP_KINDS}")
        operands = [self._adopt(t if isinstance(t, Tensor) else Tensor(t)) for t in inputs]
        value, cache = _FORWARD[kind](*(t.data for t in operands), **params)
        return self._record(kind, (t.node for t in operands), cache, np.asarray(value, dtype=np.float64))

    def backward(self, loss):
        """Gradients of a scalar loss with respect to every registered variable."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValidationError("loss was not produced on this tape")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        adjoints = [None] * len(self.nodes)
        adjoints[loss.node] = np.float64(1.0)
        for index in range(loss.node, -1, -1):
            grad = adjoints[index]
            node = self.nodes[index]
            if grad is None or not node.parents:
                continue
            for parent, parent_grad in zip(node.parents, _BACKWARD[node.kind](grad, node.cache)):
                if adjoints[parent] is None:
                    adjoints[parent] = parent_grad
                else:
                    adjoints[parent] = adjoints[parent] + parent_grad

        grads = {}
        for name, index in self.variables.items():
            grad = adjoints[index]
            if grad is None:
                grad = np.zeros(self.nodes[index].shape)
            grads[name] = Tensor(np.reshape(grad, self.nodes[index].shape))
        return GradientSet(grads)


# Functional spellings, used where operator syntax would hide the kind.
def forward_op(kind, *inputs, **params):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    return _tape_for(*tensors).forward_op(kind, *tensors, **params)


def tanh(x):
    return forward_op("tanh", x)


def absolute(x):
    return forward_op("abs", x)


def square(x):
    return forward_op("square", x)


def total(x):
    return forward_op("sum", x)


def mean(x):
    return forward_op("mean", x)


def reshape(x, shape):
    return forward_op("reshape", x, shape=shape)


def backward(loss):
    if loss.tape is None:
        raise ValidationError("loss was not produced on a tape")
    return loss.tape.backward(loss)


def finite_diff_check(fn, params, step=1e-5):
    """
    Largest relative disagreement between autodiff and central differences.

    fn maps a dict of parameter tensors (bound on one tape) to a scalar tensor.
    Each entry contributes |autodiff - fd| / (|fd| + 1e-8).
    """
    params = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    tape = Tape()
    bound = {name: tape.variable(name, value) for name, value in params.items()}
    grads = tape.backward(fn(bound))

    def evaluate(values):
        scratch = Tape()
        return fn({name: scratch.constant(value) for name, value in values.items()}).item()

    worst = 0.0
    for name, value in params.items():
        analytic = grads[name].data
        for index in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][index] += step
            minus[name][index] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            error = abs(analytic[index] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, error)
    return worst
