"""Dense tensors with a reverse-mode differentiation graph.

Every differentiable operation produces a new :class:`Tensor` whose ``_node``
records the inputs and a closure mapping the output gradient to input
gradients.  Nodes carry a global sequence number so that :func:`backward`
can replay them in exact reverse execution order.
"""

import contextlib
import itertools

import numpy as np

from .errors import GradientError

_DTYPE = [np.float32]
_SEQ = itertools.count()
_TAPES = []
_GRAD_ENABLED = [True]


def default_dtype():
    return _DTYPE[-1]


def set_default_dtype(dtype):
    _DTYPE[-1] = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a differentiation graph."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def sum(self):
        return tensor_sum(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(data, inputs, backward_fn, op):
    """Wrap ``data`` as the output of ``op``; records a node only if a gradient is needed."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
        for tape in _TAPES:
            tape.records.append(out._node)
    return out


class GradTape:
    """Ordered record of the differentiable operations executed while active.

    Usable as a context manager; operations executed inside the block are
    appended in execution order.  ``backward`` on a tape only accepts losses
    whose whole graph was recorded by this tape.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, tape=self)


def _reachable(loss):
    order, seen, stack = [], set(), [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._node.inputs)
    order.sort(key=lambda t: t._node.seq, reverse=True)
    return order


def _accumulate(t, g):
    if g.shape != t.shape:
        raise GradientError(f"gradient shape {g.shape} does not match tensor shape {t.shape} ({t._node.op if t._node else 'leaf'})")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def backward(loss, tape=None):
    """Propagate d(loss)/d(t) into ``t.grad`` for every reachable tensor requiring a gradient.

    Gradients add into existing ``grad`` buffers of leaves, so fan-out and
    repeated use accumulate.  A graph may be traversed once; a second call
    raises :class:`GradientError` instead of double-counting.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise GradientError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires a gradient")
    nodes = _reachable(loss)
    if tape is not None:
        recorded = {id(n) for n in tape.records}
        missing = [t._node.op for t in nodes if id(t._node) not in recorded]
        if missing:
            raise GradientError(f"operations not recorded on this tape: {sorted(set(missing))}")
    for t in nodes:
        if t._node.consumed:
            raise GradientError(
                f"backward already ran through '{t._node.op}'; rebuild the graph (forward again) "
                "instead of accumulating twice"
            )

    pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in nodes:
        g = pending.pop(id(t), None)
        node = t._node
        node.consumed = True
        if g is None:
            continue
        t.grad = g
        grads = node.backward_fn(g)
        node.backward_fn = None
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, gi)
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi


# elementwise and reduction primitives used to assemble the network


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, dtype=a.dtype if isinstance(a, Tensor) else None)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), grad_fn, "add")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), grad_fn, "mul")


def tensor_sum(a):
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), grad_fn, "sum")


def concat(tensors, axis=1):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")
