"""Dense tensors with reverse-mode autodiff, the Adam optimizer, and FMAT I/O.

The tape is rebuilt on every forward pass: each operation returns a new
Tensor holding references to its parents and a closure that maps the
upstream gradient to parent gradients. ``Tensor.backward()`` walks the
graph in reverse topological order. Parameters and activations default to
float32; float64 inputs are preserved so gradient checks can run in double
precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericsError

_FLOAT_TYPES = (np.float32, np.float64)


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_TYPES:
        return arr.astype(np.float32)
    return arr


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A row-major float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    # -- graph construction ------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward_fn):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    def backward(self):
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward_fn(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += pgrad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _coerce(other, dtype):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=dtype))

    def __add__(self, other):
        other = self._coerce(other, self.dtype)
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other, self.dtype)
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other, self.dtype) - self

    def __mul__(self, other):
        other = self._coerce(other, self.dtype)
        return Tensor._from_op(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        if other.data.ndim != 2:
            raise ConfigError("matmul right operand must be a matrix")

        def backward(g):
            lhs = g @ other.data.T
            rows = self.data.reshape(-1, self.data.shape[-1])
            rhs = rows.T @ g.reshape(-1, g.shape[-1])
            return lhs, rhs

        return Tensor._from_op(self.data @ other.data, (self, other), backward)

    def __getitem__(self, idx):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(self.data[idx], (self,), backward)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),)
        )

    # -- reductions and nonlinearities ---------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gx, self.shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def abs(self):
        # sign(0) == 0, which pins the L1 subgradient at zero residual to 0
        return Tensor._from_op(
            np.abs(self.data), (self,), lambda g: (g * np.sign(self.data),)
        )

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            return (p * (g - dot),)

        return Tensor._from_op(p, (self,), backward)


def stack(tensors, axis=0):
    """Stack tensors along a new axis; gradients split back to each input."""
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- gradient checking -------------------------------------------------------


def grad_check(fn, point, eps):
    """Compare analytic gradients of a scalar function against central
    finite differences, returning the max relative error over coordinates."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    x = Tensor(point.data.copy(), requires_grad=True, dtype=point.dtype)
    out = fn(x)
    if not np.all(np.isfinite(out.data)):
        raise NumericsError("function output is not finite at the check point")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    fd = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(Tensor(x.data.copy(), dtype=x.dtype)).data)
        flat[i] = orig - eps
        lo = float(fn(Tensor(x.data.copy(), dtype=x.dtype)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericsError("non-finite function value during finite differences")
        fd[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(fd))
    return float(np.max(np.abs(a - fd) / denom))


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_shapes(cls, shapes, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            first_moment=[np.zeros(s, dtype=np.float32) for s in shapes],
            second_moment=[np.zeros(s, dtype=np.float32) for s in shapes],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_update_arrays(params, grads, state, lr):
    """In-place Adam update on plain numpy arrays with bias correction."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ConfigError("adam: parameter/gradient/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ConfigError("adam: parameter and gradient shapes differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def adam_step(params, grads, state, lr):
    """Adam update over Tensor parameters; gradients may be Tensors or arrays."""
    raw_grads = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    adam_update_arrays([p.data for p in params], raw_grads, state, lr)
    return params, state


# -- FMAT binary format -------------------------------------------------------

_FMAT_MAGIC = b"FMAT"


def write_fmat(fh, array):
    """Write one tensor: magic "FMAT", u32 rank, u32 dims, f32 row-major."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(_FMAT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_fmat(fh):
    magic = fh.read(4)
    if magic != _FMAT_MAGIC:
        raise DataError(f"bad FMAT magic: {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise DataError("truncated FMAT payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_fmat(path, array):
    with open(path, "wb") as fh:
        write_fmat(fh, array)


def load_fmat(path):
    with open(path, "rb") as fh:
        return read_fmat(fh)
