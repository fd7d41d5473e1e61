"""
Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float32 (or float64) ndarray. Every operation that
involves a tensor with ``requires_grad`` records its parents and a closure
mapping the output gradient to parent gradients; ``Tensor.backward()``
walks the graph in reverse topological order.

Storage defaults to 32-bit. Float64 arrays are kept as float64 so that
gradient checks can run without float32 rounding noise. Reductions
accumulate in float64 regardless of storage precision.
"""

import logging

import numpy as np

from .exceptions import ShapeError

logger = logging.getLogger(__name__)

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None):
    """Coerce input to a float ndarray (float32 unless float64 was given)."""
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in FLOAT_TYPES:
        return data
    if isinstance(data, np.generic) and data.dtype in FLOAT_TYPES:
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        axes.append(a % ndim)
    return tuple(sorted(set(axes)))


class Tensor:
    """Dense array with an optional gradient tape."""

    # Make ndarray <op> Tensor dispatch to the Tensor's reflected method.
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ''

    # ------------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -------------------------------------------------------------- autograd

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # ------------------------------------------------------------- operators

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    def __radd__(self, other):
        return add(self._wrap(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    def __rmul__(self, other):
        return mul(self._wrap(other), self)

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return mul(self, self._wrap(-1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _topological_order(root):
    """Post-order of the graph below ``root``, restricted to grad-carrying nodes."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make(data, parents, backward, op):
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), backward, 'mul')


def div(a, b):
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), backward, 'div')


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)
    return _make(out, (a,), backward, 'pow')


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)
    return _make(out, (a,), backward, 'exp')


def log(a, floor=None):
    """Natural log; with ``floor`` the input is clamped from below first."""
    if floor is None:
        clamped = a.data
        active = None
    else:
        active = a.data > floor
        clamped = np.where(active, a.data, np.asarray(floor, dtype=a.data.dtype))
    out = np.log(clamped)

    def backward(g):
        grad = g / clamped
        if active is not None:
            grad = np.where(active, grad, 0.0)
        return (grad,)
    return _make(out, (a,), backward, 'log')


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)
    return _make(out, (a,), backward, 'sqrt')


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward, 'relu')


def clamp_min(a, floor):
    """max(a, floor) for a scalar floor (hinge)."""
    mask = a.data > floor

    def backward(g):
        return (g * mask,)
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.data.dtype))
    return _make(out, (a,), backward, 'clamp_min')


def sigmoid(a):
    """Logistic function, clamped one ulp inside (0, 1)."""
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    tiny = np.finfo(a.data.dtype).eps
    out = np.clip(out, tiny, 1.0 - tiny).astype(a.data.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)
    return _make(out, (a,), backward, 'sigmoid')


# ----------------------------------------------------------------- reductions

def reduce_sum(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)
    return _make(out, (a,), backward, 'sum')


def reduce_mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)
    return _make(out, (a,), backward, 'mean')


def _reduce_extreme(a, axis, keepdims, fn, op):
    axes = _normalize_axes(axis, a.ndim)
    if any(a.shape[i] == 0 for i in axes):
        raise ShapeError(f"{op} over an empty axis")
    kept = fn(a.data, axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        # ties share the gradient evenly
        mask = (a.data == kept)
        count = np.sum(mask, axis=axes, keepdims=True)
        return (g * mask / count,)
    return _make(out, (a,), backward, op)


def reduce_max(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, np.max, 'max')


def reduce_min(a, axis=None, keepdims=False):
    return _reduce_extreme(a, axis, keepdims, np.min, 'min')


# -------------------------------------------------------------------- shaping

def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)
    return _make(out, (a,), backward, 'reshape')


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return _make(np.transpose(a.data, axes), (a,), backward, 'transpose')


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _make(a.data[index], (a,), backward, 'getitem')


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, tensors, backward, 'concat')


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))
    return _make(out, tensors, backward, 'stack')


# --------------------------------------------------------------------- linear

def matmul(a, b):
    """Batched matrix product of rank >= 2 operands (numpy broadcasting rules)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), (a, b), backward, 'matmul')


def linear(x, weight, bias=None):
    """x[..., c_in] @ weight[c_in, c_out] + bias[c_out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[-1]} channels, "
            f"projection expects {weight.shape[0]}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T.astype(np.float64) @ g2.astype(np.float64)
        grads = [gx, gw]
        if bias is not None:
            grads.append(np.sum(g2, axis=0, dtype=np.float64))
        return tuple(grads)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, 'linear')


# ------------------------------------------------------------ fused functions

def softmax(a, axis=-1):
    """Max-shifted softmax along one axis."""
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64)).astype(a.data.dtype)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return (out * (g - inner),)
    return _make(out, (a,), backward, 'softmax')


def l2_normalize(a, axis=-1, epsilon=1e-12):
    """a / max(||a||_2, epsilon) along ``axis``."""
    norm = np.sqrt(np.sum(np.square(a.data, dtype=np.float64), axis=axis, keepdims=True))
    active = norm > epsilon
    denom = np.where(active, norm, epsilon)
    out = (a.data / denom).astype(a.data.dtype)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        projected = (g - out * inner) / denom
        return (np.where(active, projected, g / epsilon),)
    return _make(out, (a,), backward, 'l2_normalize')
