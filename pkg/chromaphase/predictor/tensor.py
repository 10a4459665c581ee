"""
Reverse-mode automatic differentiation on numpy arrays.

A `Tensor` wraps an array and remembers the tensors it was computed
from together with a closure that pushes its gradient back to them.
`Tensor.backward` walks the graph in reverse topological order.
Broadcasting follows numpy; gradients are summed back to the shape of
each operand.
"""

import contextlib

import numpy as np
import scipy.special

from chromaphase.util import PredictorError

DTYPES = {
    "float64": np.float64,
    "float32": np.float32,
}

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """
    Context manager inside which no graph is recorded.
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def unbroadcast(grad, shape):
    """
    Sum `grad` down to `shape`, undoing numpy broadcasting.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Class representing a node of the computation graph.
    """

    # Make numpy defer to the reflected operators when an array is on
    # the left of an arithmetic expression.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None, parents=(), backward_fn=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={})".format(self.shape, self.requires_grad)

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """
        Accumulate d(self)/d(leaf) into the `grad` of every leaf that
        requires gradients. `grad` defaults to ones (for scalars).
        """
        if not self.requires_grad:
            raise PredictorError("backward on a tensor that does not require gradients")
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise PredictorError(
                "upstream gradient shape {} does not match tensor shape {}", grad.shape, self.shape
            )
        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward_fn is None:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward_fn(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = unbroadcast(parent_grad, parent.shape)
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # Operators

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
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


def as_tensor(value, dtype=None):
    """
    Return `value` unchanged if it is a Tensor, else wrap it as a
    constant.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _result(data, parents, backward_fn):
    requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, dtype=data.dtype if data.dtype == np.float32 else None)
    return Tensor(
        data,
        requires_grad=True,
        dtype=data.dtype if data.dtype == np.float32 else None,
        parents=parents,
        backward_fn=backward_fn,
    )


def _binary(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def add(a, b):
    a, b = _binary(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _binary(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _binary(a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = _binary(a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    """
    Elementwise a**exponent for a constant scalar exponent.
    """
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise PredictorError("tensor exponents are not supported")
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a, b):
    a, b = _binary(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise PredictorError("matmul needs 2D operands, got {} and {}", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise PredictorError("matmul shape mismatch: {} @ {}", a.shape, b.shape)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(count)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sigmoid(a):
    a = as_tensor(a)
    out = scipy.special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    """
    log(1 + e^a), computed without overflow.
    """
    a = as_tensor(a)
    out = np.logaddexp(0, a.data)
    return _result(out, (a,), lambda g: (g * scipy.special.expit(a.data),))


def silu(a):
    a = as_tensor(a)
    s = scipy.special.expit(a.data)
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + a.data * s * (1 - s)),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def stop_gradient(a):
    """
    Return a constant copy of `a`: the value flows on, gradients do not.
    """
    a = as_tensor(a)
    return Tensor(a.data.copy(), dtype=a.dtype)


detach = stop_gradient


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward)


def global_mean_pool(a):
    """
    Average a (B, C, H, W) tensor over its spatial axes, keeping them
    as size-1 axes.
    """
    return mean(a, axis=(2, 3), keepdims=True)


def conv2d(x, weight, bias=None):
    """
    Cross-correlate a (B, Cin, H, W) input with a (Cout, Cin, k, k)
    kernel under periodic boundaries (output at (i, j) sees inputs
    (i + u - k//2, j + v - k//2)). `k` must be odd.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise PredictorError("conv2d needs 4D input and kernel, got {} and {}", x.shape, weight.shape)
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise PredictorError("conv2d: input has {} channels, kernel expects {}", x.shape[1], cin)
    if kh != kw or kh % 2 == 0:
        raise PredictorError("conv2d kernels must be square with odd size, got {}x{}", kh, kw)
    r = kh // 2
    offsets = [(u, v) for u in range(kh) for v in range(kw)]
    out = np.zeros((x.shape[0], cout) + x.shape[2:], dtype=x.dtype)
    for u, v in offsets:
        shifted = np.roll(x.data, shift=(r - u, r - v), axis=(2, 3))
        out += np.einsum("oc,bchw->bohw", weight.data[:, :, u, v], shifted)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        parents = parents + (bias,)

    def backward(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for u, v in offsets:
            shifted = np.roll(x.data, shift=(r - u, r - v), axis=(2, 3))
            gw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, shifted)
            back = np.einsum("oc,bohw->bchw", weight.data[:, :, u, v], g)
            gx += np.roll(back, shift=(u - r, v - r), axis=(2, 3))
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, parents, backward)


ACTIVATIONS = {
    "silu": silu,
    "tanh": tanh,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "identity": lambda a: as_tensor(a),
}
