"""
Dense tensors with reverse-mode automatic differentiation

Every op records its inputs and a backward closure on the output tensor. When a
Graph is active the op is also appended to it, in creation order, which is a
topological order. detach() returns a leaf with identical values that never
receives or propagates gradient: values flow, gradients stop.

Only scalar-times-tensor broadcasting is implicit. Everything else must conform
exactly; expand() is the explicit way to broadcast size-1 axes.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from util import ContractError, DimensionError, NumericError

class Precision:
    """process-wide float type for newly created tensors"""

    dtype = np.float32

    @classmethod
    def set(cls, name):
        'set by name: f32 or f64'

        assert name in ('f32', 'f64'), f"unknown precision {name}"
        cls.dtype = np.float32 if name == 'f32' else np.float64

    @classmethod
    def name(cls):
        'f32 or f64'

        return 'f32' if cls.dtype == np.float32 else 'f64'

_local = threading.local()
_node_ids = itertools.count()

def _graph_stack():
    if not hasattr(_local, 'graphs'):
        _local.graphs = []

    return _local.graphs

def grad_enabled():
    'is gradient recording enabled in this thread'

    return getattr(_local, 'grad_enabled', True)

@contextmanager
def no_grad():
    """disable gradient recording (rollouts, finite differences)"""

    prev = grad_enabled()
    _local.grad_enabled = False

    try:
        yield
    finally:
        _local.grad_enabled = prev

class Tensor:
    """n-dimensional float array plus its place in the autodiff graph"""

    def __init__(self, data, requires_grad=False, op='leaf', parents=(), backward_fn=None, detached=False):
        self.data = data
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.detached = detached
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        'tuple of extents'

        return self.data.shape

    @property
    def dtype(self):
        'numpy dtype'

        return self.data.dtype

    @property
    def ndim(self):
        'number of axes'

        return self.data.ndim

    def numpy(self):
        'copy of the values'

        return self.data.copy()

    def item(self):
        'scalar value'

        assert self.data.size == 1, f"item() on tensor of shape {self.shape}"

        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)

        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # tensors are graph nodes; identity semantics
    __hash__ = object.__hash__

def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """make a leaf tensor in the current precision"""

    arr = np.array(data, dtype=Precision.dtype if dtype is None else dtype)

    if not np.isfinite(arr).all():
        raise NumericError("tensor() given non-finite values", op='leaf')

    return Tensor(arr, requires_grad=requires_grad)

def parameter(data, dtype=None) -> Tensor:
    'a trainable leaf'

    return tensor(data, requires_grad=True, dtype=dtype)

def zeros(shape, dtype=None) -> Tensor:
    'constant zeros'

    return Tensor(np.zeros(shape, dtype=Precision.dtype if dtype is None else dtype))

class Graph:
    """records every op executed while active (a context manager, per thread)"""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *args):
        stack = _graph_stack()
        assert stack and stack[-1] is self, "Graph exit out of order"
        stack.pop()

    def record(self, t):
        'add a node'

        self.nodes.append(t)

    def node_count(self):
        'number of recorded nodes'

        return len(self.nodes)

    def topological_order(self):
        'nodes in an order where every input precedes its consumers'

        return list(self.nodes)

def _current_graph():
    stack = _graph_stack()

    return stack[-1] if stack else None

def _check_finite(data, op):
    if not np.isfinite(data).all():
        bad = np.argwhere(~np.isfinite(data))
        index = tuple(int(i) for i in bad[0]) if bad.size else None

        raise NumericError(f"{op} produced non-finite values (first at index {index}, shape {data.shape})",
                           op=op, index=index, shape=data.shape)

def _make(data, op, parents, backward_fn):
    """wrap an op result: finiteness check, gradient linkage, graph record"""

    _check_finite(data, op)

    if grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, True, op, tuple(parents), backward_fn)
    else:
        out = Tensor(data, False, op)

    graph = _current_graph()

    if graph is not None:
        graph.record(out)

    return out

def _check_dtypes(op, *ts):
    dt = ts[0].dtype

    for t in ts[1:]:
        if t.dtype != dt:
            raise DimensionError(f"{op}: mixed dtypes {dt} and {t.dtype}", op=op)

def _is_scalar(t):
    return t.ndim == 0

def _reduce_like(g, shape):
    'sum a gradient back to a scalar operand if needed'

    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)

    return g

def detach(x: Tensor) -> Tensor:
    """identical values, no gradient history, requires_grad False"""

    out = Tensor(x.data.copy(), requires_grad=False, op='detach', detached=True)
    graph = _current_graph()

    if graph is not None:
        graph.record(out)

    return out

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """batched matrix product; leading axes must match exactly"""

    _check_dtypes('matmul', a, b)

    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform", op='matmul')

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, 'matmul', (a, b), backward)

def add(a: Tensor, b: Tensor) -> Tensor:
    """elementwise sum of equal shapes (or a 0-d operand)"""

    _check_dtypes('add', a, b)

    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add shapes {a.shape} and {b.shape} differ", op='add')

    def backward(g):
        return (_reduce_like(g, a.shape), _reduce_like(g, b.shape))

    return _make(a.data + b.data, 'add', (a, b), backward)

def mul(a: Tensor, b: Tensor) -> Tensor:
    """elementwise product of equal shapes (or a 0-d operand)"""

    _check_dtypes('mul', a, b)

    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ", op='mul')

    def backward(g):
        return (_reduce_like(g * b.data, a.shape), _reduce_like(g * a.data, b.shape))

    return _make(a.data * b.data, 'mul', (a, b), backward)

def scale(x: Tensor, c: float) -> Tensor:
    'multiply by a python constant'

    c = float(c)

    return _make(x.data * x.dtype.type(c), 'scale', (x,), lambda g: (g * x.dtype.type(c),))

def shift(x: Tensor, c: float) -> Tensor:
    'add a python constant'

    c = float(c)

    return _make(x.data + x.dtype.type(c), 'shift', (x,), lambda g: (g,))

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))

def _elu_grad(x, _y):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(x.dtype)

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))

ELEMENTWISE = {
    # name: (forward(x), derivative(x, y))
    'elu': (_elu, _elu_grad),
    'exp': (np.exp, lambda x, y: y),
    'tanh': (np.tanh, lambda x, y: 1 - y * y),
    'relu': (lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype)),
    'sigmoid': (_sigmoid, lambda x, y: y * (1 - y)),
    'log': (np.log, lambda x, y: 1 / x),
    'reciprocal': (lambda x: 1 / x, lambda x, y: -y * y),
}

def elementwise(x: Tensor, fn: str) -> Tensor:
    """apply a named scalar function elementwise"""

    if fn not in ELEMENTWISE:
        raise ContractError(f"unknown elementwise function '{fn}'")

    forward, derivative = ELEMENTWISE[fn]

    with np.errstate(all='ignore'):
        y = forward(x.data).astype(x.dtype, copy=False)

    return _make(y, fn, (x,), lambda g: (g * derivative(x.data, y),))

def elu(x):
    'exponential linear unit'

    return elementwise(x, 'elu')

def exp(x):
    'exponential'

    return elementwise(x, 'exp')

def tanh(x):
    'hyperbolic tangent'

    return elementwise(x, 'tanh')

def relu(x):
    'rectifier'

    return elementwise(x, 'relu')

def sigmoid(x):
    'logistic function'

    return elementwise(x, 'sigmoid')

def log(x):
    'natural log'

    return elementwise(x, 'log')

def reciprocal(x):
    '1 / x'

    return elementwise(x, 'reciprocal')

def clamp_min(x: Tensor, lo: float) -> Tensor:
    'max(x, lo); gradient passes only where x > lo'

    mask = (x.data > lo).astype(x.dtype)

    return _make(np.maximum(x.data, x.dtype.type(lo)), 'clamp_min', (x,), lambda g: (g * mask,))

def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """permute axes; default swaps the last two"""

    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 axes, got shape {x.shape}", op='transpose')

        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]

    axes = list(axes)

    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for shape {x.shape}", op='transpose')

    inverse = list(np.argsort(axes))

    return _make(np.transpose(x.data, axes), 'transpose', (x,), lambda g: (np.transpose(g, inverse),))

def reshape(x: Tensor, shape) -> Tensor:
    'same data, new extents'

    shape = tuple(int(s) for s in shape)

    if int(np.prod(shape, dtype=np.int64)) != x.data.size or any(s < 0 for s in shape):
        raise DimensionError(f"cannot reshape {x.shape} to {shape}", op='reshape')

    orig = x.shape

    return _make(x.data.reshape(shape), 'reshape', (x,), lambda g: (g.reshape(orig),))

def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    """join along an existing axis; other extents must match"""

    if not xs:
        raise ContractError("concat of an empty list")

    _check_dtypes('concat', *xs)
    ndim = xs[0].ndim
    axis = axis % ndim

    for x in xs:
        if x.ndim != ndim or x.shape[:axis] + x.shape[axis+1:] != xs[0].shape[:axis] + xs[0].shape[axis+1:]:
            raise DimensionError(f"concat shapes {[t.shape for t in xs]} differ off axis {axis}", op='concat')

    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    return _make(np.concatenate([x.data for x in xs], axis=axis), 'concat', tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))

def stack(xs: Sequence[Tensor], axis=0) -> Tensor:
    """join equal-shaped tensors along a new axis"""

    if not xs:
        raise ContractError("stack of an empty list")

    _check_dtypes('stack', *xs)

    for x in xs:
        if x.shape != xs[0].shape:
            raise DimensionError(f"stack shapes {[t.shape for t in xs]} differ", op='stack')

    n = len(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), 'stack', tuple(xs), backward)

def select(x: Tensor, index: int, axis=0) -> Tensor:
    """take one position along an axis (the axis is removed)"""

    axis = axis % x.ndim

    if not 0 <= index < x.shape[axis]:
        raise DimensionError(f"select index {index} out of range for axis {axis} of {x.shape}", op='select')

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[(slice(None),) * axis + (index,)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=axis), 'select', (x,), backward)

def expand(x: Tensor, shape) -> Tensor:
    """explicit broadcast of size-1 axes to the given shape (same rank)"""

    shape = tuple(shape)

    if len(shape) != x.ndim or any(s != e and s != 1 for s, e in zip(x.shape, shape)):
        raise DimensionError(f"cannot expand {x.shape} to {shape}", op='expand')

    axes = tuple(i for i, (s, e) in enumerate(zip(x.shape, shape)) if s != e)

    return _make(np.broadcast_to(x.data, shape).copy(), 'expand', (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),))

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """rows of a (vocab, width) table indexed by an integer array"""

    ids = np.asarray(ids)

    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}", op='embedding_lookup')

    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError(f"embedding ids must be integers, got {ids.dtype}", op='embedding_lookup')

    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids outside [0, {table.shape[0]})", op='embedding_lookup')

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], 'embedding_lookup', (table,), backward)

def softmax_rows(x: Tensor) -> Tensor:
    'softmax over the last axis'

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    return _make(s, 'softmax_rows', (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))

def log_softmax_rows(x: Tensor) -> Tensor:
    'log of softmax over the last axis, computed stably'

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    return _make(y, 'log_softmax_rows', (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))

def rms_norm(x: Tensor, gain: Tensor, eps=1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis"""

    _check_dtypes('rms_norm', x, gain)

    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm gain {gain.shape} does not match input {x.shape}", op='rms_norm')

    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    n = x.data / r

    def backward(g):
        gn = g * gain.data
        gx = (gn - n * (gn * n).mean(axis=-1, keepdims=True)) / r
        ggain = (g * n).reshape(-1, x.shape[-1]).sum(axis=0)
        return (gx, ggain)

    return _make(n * gain.data, 'rms_norm', (x, gain), backward)

def sum(x: Tensor, axis=None) -> Tensor: # pylint: disable=redefined-builtin
    'sum over an axis or all axes'

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)

        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis), dtype=x.dtype), 'sum', (x,), backward)

def mean(x: Tensor, axis=None) -> Tensor:
    'mean over an axis or all axes'

    count = x.data.size if axis is None else x.shape[axis]

    return scale(sum(x, axis), 1.0 / count)

# op kinds usable through apply()
OPS: Dict[str, Callable] = {
    'matmul': matmul,
    'add': add,
    'mul': mul,
    'elementwise_fn': elementwise,
    'transpose': transpose,
    'reshape': reshape,
    'concat': lambda *xs, axis=0: concat(xs, axis),
    'stack': lambda *xs, axis=0: stack(xs, axis),
    'embedding_lookup': embedding_lookup,
    'softmax_rows': softmax_rows,
    'log_softmax_rows': log_softmax_rows,
    'rms_norm': rms_norm,
    'sum': sum,
    'mean': mean,
    'scale': scale,
    'shift': shift,
    'clamp_min': clamp_min,
    'select': select,
    'expand': expand,
}

def apply(op_kind: str, *inputs, **params) -> Tensor:
    """dispatch an op by name, e.g. apply('elementwise_fn', x, fn='tanh')"""

    if op_kind not in OPS:
        raise ContractError(f"unknown op kind '{op_kind}'")

    return OPS[op_kind](*inputs, **params)

def backward(loss: Tensor, accumulate=True) -> Dict[int, np.ndarray]:
    """reverse-mode sweep from a scalar loss

    returns node_id -> gradient for every non-detached ancestor that requires grad;
    with accumulate, leaf tensors also get the gradient added to .grad
    """

    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {}

    if not loss.requires_grad:
        return grads

    # iterative post-order dfs (graphs get deep)
    order: List[Tensor] = []
    visited = set()
    stack_ = [(loss, False)]

    while stack_:
        node, done = stack_.pop()

        if done:
            order.append(node)
            continue

        if node.node_id in visited:
            continue

        visited.add(node.node_id)
        stack_.append((node, True))

        for p in node.parents:
            if p.requires_grad and p.node_id not in visited:
                stack_.append((p, False))

    grads[loss.node_id] = np.ones_like(loss.data)

    for node in reversed(order):
        g = grads.get(node.node_id)

        if g is None or node.backward_fn is None:
            continue

        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad or pg is None:
                continue

            pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg.copy() if prev is None else prev + pg

    if accumulate:
        for node in order:
            if node.backward_fn is None and node.node_id in grads:
                g = grads[node.node_id]
                node.grad = g.copy() if node.grad is None else node.grad + g

    return grads

def finite_difference_check(fn: Callable[[List[Tensor]], Tensor], params: List[Tensor], step=1e-5,
                            max_coords=None, rng=None, floor=1e-12) -> float:
    """max relative error between analytic and central-difference gradients

    fn maps the parameter list to a scalar tensor; float64 parameters required.
    Relative error per coordinate is |a - cd| / max(|a|, |cd|, floor). Raising
    floor to the central-difference noise level (~1e-7 for an O(1) loss) keeps
    near-zero coordinates from dominating.
    """

    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"finite_difference_check needs float64 parameters, got {p.dtype}")

        p.grad = None

    loss = fn(params)

    with no_grad():
        again = fn(params)

    if loss.data.size != 1:
        raise ContractError(f"finite_difference_check fn must return a scalar, got shape {loss.shape}")

    if loss.item() != again.item():
        raise ContractError(f"non-deterministic fn: {loss.item()} != {again.item()}")

    backward(loss)

    coords = [(pi, i) for pi, p in enumerate(params) for i in range(p.data.size)]

    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        picks = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picks]

    worst = 0.0

    with no_grad():
        for pi, i in coords:
            p = params[pi]
            analytic = 0.0 if p.grad is None else float(p.grad.flat[i])
            orig = p.data.flat[i]

            p.data.flat[i] = orig + step
            f_plus = fn(params).item()
            p.data.flat[i] = orig - step
            f_minus = fn(params).item()
            p.data.flat[i] = orig

            cd = (f_plus - f_minus) / (2 * step)
            err = abs(analytic - cd) / max(abs(analytic), abs(cd), floor)
            worst = max(worst, err)

    return worst
