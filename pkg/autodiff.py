"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray. Operations are `Function` subclasses: `apply`
runs the forward pass eagerly and, when any input requires gradient, records
the function on the output so `backward` can walk the graph in reverse
topological order. The graph is released after one backward pass; calling
`backward` again on the same loss raises `AutogradError`.
"""
import contextlib
import logging
import math

import numpy as np

from errors import AutogradError, ContractViolation

logger = logging.getLogger(__name__)

_state = {'dtype': np.float32, 'grad_enabled': True}


def default_dtype():
    return _state['dtype']


def set_default_dtype(dtype):
    _state['dtype'] = np.dtype(dtype).type


@contextlib.contextmanager
def float64_mode():
    """Create new tensors as 64-bit floats inside the block (used by gradient checks)."""
    previous = _state['dtype']
    _state['dtype'] = np.float64
    try:
        yield
    finally:
        _state['dtype'] = previous


@contextlib.contextmanager
def no_grad():
    previous = _state['grad_enabled']
    _state['grad_enabled'] = False
    try:
        yield
    finally:
        _state['grad_enabled'] = previous


def is_grad_enabled():
    return _state['grad_enabled']


def unbroadcast(grad, shape):
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """One recorded operation on the tape (op kind, parents, backward rule)."""

    op_kind = 'op'

    def __init__(self, *parents):
        self.parents = parents
        self.released = False

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad):
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    def release(self):
        self.released = True
        self.__dict__ = {'parents': (), 'released': True}

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = np.asarray(out)
        dtype = out.dtype if np.issubdtype(out.dtype, np.floating) else None
        if not requires_grad:
            return Tensor(out, requires_grad=False, dtype=dtype)
        return Tensor(out, requires_grad=True, _ctx=fn, dtype=dtype)


class Tensor:
    """Dense array with an optional gradient and a link to the op that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _ctx=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = _ctx

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._ctx is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- backward ----------------------------------------------------------
    def backward(self):
        if self.size != 1:
            raise AutogradError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            logger.debug("backward called on a tensor that does not require grad")
            return
        if self._ctx is not None and self._ctx.released:
            raise AutogradError("backward called twice on the same graph; it was released after the first pass")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            fn = node._ctx
            if fn.released:
                raise AutogradError("graph was already released by a previous backward pass")
            parent_grads = fn.backward(grad)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pgrad in zip(fn.parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                pgrad = np.asarray(pgrad, dtype=parent.data.dtype)
                key = id(parent)
                grads[key] = pgrad if key not in grads else grads[key] + pgrad
        for node in order:
            if node._ctx is not None:
                node._ctx.release()

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _like(other, self))

    def __radd__(self, other):
        return Add.apply(_like(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _like(other, self))

    def __rsub__(self, other):
        return Sub.apply(_like(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _like(other, self))

    def __rmul__(self, other):
        return Mul.apply(_like(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _like(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_like(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Slice.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def _like(value, ref):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.data.dtype), requires_grad=False, dtype=ref.data.dtype)


def parameter(data):
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Element-wise arithmetic
# ---------------------------------------------------------------------------

class Add(Function):
    op_kind = 'add'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    op_kind = 'sub'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    op_kind = 'mul'

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    op_kind = 'div'

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = unbroadcast(grad / self.b, self.a.shape)
        grad_b = unbroadcast(-grad * self.a / (self.b ** 2), self.b.shape)
        return grad_a, grad_b


class Neg(Function):
    op_kind = 'neg'

    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Pow(Function):
    op_kind = 'pow'

    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return grad * self.exponent * self.a ** (self.exponent - 1)


class Exp(Function):
    op_kind = 'exp'

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    op_kind = 'log'

    def forward(self, a):
        if np.any(a <= 0):
            raise ContractViolation("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return grad / self.a


def stop_gradient(x):
    """Same values as `x`; the result is a constant leaf that never accumulates gradient."""
    x = as_tensor(x)
    return Tensor(x.data.copy(), requires_grad=False, dtype=x.data.dtype)


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    op_kind = 'sum'

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.shape).copy()


class Mean(Function):
    op_kind = 'mean'

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad / self.count, self.shape).copy()


class Reshape(Function):
    op_kind = 'reshape'

    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ContractViolation(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(self, grad):
        return grad.reshape(self.shape)


class Transpose(Function):
    op_kind = 'transpose'

    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class Slice(Function):
    op_kind = 'slice'

    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.index, grad)
        return full


class Pad(Function):
    op_kind = 'pad'

    def forward(self, a, widths, value=0.0):
        self.widths = widths
        return np.pad(a, widths, mode='constant', constant_values=value)

    def backward(self, grad):
        index = tuple(slice(lo, grad.shape[i] - hi) for i, (lo, hi) in enumerate(self.widths))
        return grad[index]


def pad(x, widths, value=0.0):
    """Constant padding; `widths` is one (before, after) pair per axis."""
    return Pad.apply(x, widths=tuple(tuple(int(v) for v in w) for w in widths), value=value)


class Concat(Function):
    op_kind = 'concat'

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


class Repeat(Function):
    op_kind = 'repeat'

    def forward(self, a, repeats, axis):
        self.axis = axis % a.ndim
        self.repeats = repeats
        self.shape = a.shape
        return np.repeat(a, repeats, axis=self.axis)

    def backward(self, grad):
        new_shape = self.shape[:self.axis] + (self.shape[self.axis], self.repeats) + self.shape[self.axis + 1:]
        return grad.reshape(new_shape).sum(axis=self.axis + 1)


def repeat(x, repeats, axis):
    """Nearest-neighbour upsampling along one axis."""
    return Repeat.apply(x, repeats=int(repeats), axis=axis)


def mean_pool(x, factor, axis):
    """Non-overlapping mean pooling along `axis`; the extent must be divisible by `factor`."""
    axis = axis % x.ndim
    extent = x.shape[axis]
    if extent % factor:
        raise ContractViolation(f"axis {axis} of extent {extent} is not divisible by {factor}")
    shape = x.shape[:axis] + (extent // factor, factor) + x.shape[axis + 1:]
    return x.reshape(shape).mean(axis=axis + 1)


# ---------------------------------------------------------------------------
# Linear algebra and convolutions
# ---------------------------------------------------------------------------

class MatMul(Function):
    op_kind = 'matmul'

    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        if b.ndim == 1:
            grad_a = np.multiply.outer(grad, b)
            grad_b = np.tensordot(a, grad, axes=(tuple(range(a.ndim - 1)), tuple(range(grad.ndim))))
            return unbroadcast(grad_a, a.shape), grad_b
        grad_a = grad @ np.swapaxes(b, -1, -2)
        grad_b = np.swapaxes(a, -1, -2) @ grad
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


def matmul(a, b):
    return MatMul.apply(a, b)


def _pair(value):
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


class Conv2d(Function):
    """Cross-correlation over NCHW input via strided windows and tensordot."""

    op_kind = 'conv2d'

    def forward(self, x, weight, stride=(1, 1), padding=(0, 0)):
        if x.ndim != 4 or weight.ndim != 4:
            raise ContractViolation(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
        batch, cin, height, width = x.shape
        cout, wcin, kh, kw = weight.shape
        if cin != wcin:
            raise ContractViolation(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
        sh, sw = stride
        ph, pw = padding
        if height + 2 * ph < kh or width + 2 * pw < kw:
            raise ContractViolation(f"kernel {(kh, kw)} does not fit padded input {(height + 2 * ph, width + 2 * pw)}")
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        out_h = (height + 2 * ph - kh) // sh + 1
        out_w = (width + 2 * pw - kw) // sw + 1
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
        self.windows, self.weight = windows, weight
        self.xp_shape, self.x_shape = xp.shape, x.shape
        self.stride, self.padding = (sh, sw), (ph, pw)
        self.out_hw = (out_h, out_w)
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        sh, sw = self.stride
        ph, pw = self.padding
        out_h, out_w = self.out_hw
        _, _, kh, kw = self.weight.shape
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(grad, self.weight, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
        grad_xp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        height, width = self.x_shape[2], self.x_shape[3]
        grad_x = grad_xp[:, :, ph:ph + height, pw:pw + width]
        return grad_x, grad_w


def conv2d(x, weight, stride=1, padding=0):
    return Conv2d.apply(x, weight, stride=_pair(stride), padding=_pair(padding))


def conv1d(x, weight, stride=1, padding=0):
    """1-D convolution over (B, C, L) expressed as a height-1 conv2d."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ContractViolation(f"conv1d expects 3-D input and weight, got {x.shape} and {weight.shape}")
    batch, cin, length = x.shape
    cout, _, k = weight.shape
    out = conv2d(x.reshape(batch, cin, 1, length), weight.reshape(cout, weight.shape[1], 1, k),
                 stride=(1, stride), padding=(0, padding))
    return out.reshape(batch, cout, out.shape[-1])


# ---------------------------------------------------------------------------
# Normalisations
# ---------------------------------------------------------------------------

class NormalizeLast(Function):
    """Zero-mean, unit-variance normalisation over the last axis (no affine)."""

    op_kind = 'normalize_last'

    def forward(self, x, eps=1e-5):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        return self.xhat

    def backward(self, grad):
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * self.xhat).mean(axis=-1, keepdims=True)
        return self.inv_std * (grad - g_mean - self.xhat * gx_mean)


def layer_norm(x, eps=1e-5):
    """Normalise over the last axis; constant vectors map to zeros."""
    return NormalizeLast.apply(x, eps=eps)


def group_norm(x, groups, eps=1e-5):
    batch, channels = x.shape[0], x.shape[1]
    if channels % groups:
        raise ContractViolation(f"{channels} channels cannot be split into {groups} groups")
    rest = x.shape[2:]
    flat = x.reshape(batch, groups, -1)
    return layer_norm(flat, eps=eps).reshape((batch, channels) + tuple(rest))


class BatchNorm2dFn(Function):
    """Batch normalisation over (N, H, W) per channel; pass `mean`/`var` for evaluation mode."""

    op_kind = 'batch_norm_2d'

    def forward(self, x, gamma, beta, mean=None, var=None, eps=1e-5):
        if x.ndim != 4:
            raise ContractViolation(f"batch_norm_2d expects NCHW input, got {x.shape}")
        self.training = mean is None
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
        else:
            mean = np.asarray(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
            var = np.asarray(var, dtype=x.dtype).reshape(1, -1, 1, 1)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        return self.xhat * self.gamma + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        grad_gamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        g = grad * self.gamma
        if self.training:
            g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
            gx_mean = (g * self.xhat).mean(axis=(0, 2, 3), keepdims=True)
            grad_x = self.inv_std * (g - g_mean - self.xhat * gx_mean)
        else:
            grad_x = g * self.inv_std
        return grad_x, grad_gamma, grad_beta


def batch_norm_2d(x, gamma, beta, running_mean=None, running_var=None, eps=1e-5):
    return BatchNorm2dFn.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class Elu(Function):
    op_kind = 'elu'

    def forward(self, x, alpha=1.0):
        self.x, self.alpha = x, alpha
        self.neg = alpha * (np.exp(np.minimum(x, 0.0)) - 1.0)
        return np.where(x > 0, x, self.neg)

    def backward(self, grad):
        return grad * np.where(self.x > 0, 1.0, self.neg + self.alpha)


def elu(x, alpha=1.0):
    return Elu.apply(x, alpha=alpha)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation of GELU."""

    op_kind = 'gelu'

    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return grad * (0.5 * (1.0 + t) + 0.5 * x * dt)


def gelu(x):
    return Gelu.apply(x)


def _softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    op_kind = 'softmax'

    def forward(self, x):
        self.out = _softmax(x)
        return self.out

    def backward(self, grad):
        p = self.out
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def softmax(x):
    """Softmax over the last axis."""
    return Softmax.apply(x)


class LogSoftmax(Function):
    op_kind = 'log_softmax'

    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True)


def log_softmax(x):
    return LogSoftmax.apply(x)


# ---------------------------------------------------------------------------
# Attention, embeddings and losses
# ---------------------------------------------------------------------------

_MASK_FILL = -1e9


class ScaledDotAttention(Function):
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    `mask` is a boolean array broadcastable to (..., Tq, Tk); True marks
    positions that may not be attended to.
    """

    op_kind = 'scaled_dot_attention'

    def forward(self, q, k, v, mask=None):
        if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
            raise ContractViolation(f"attention shape mismatch q={q.shape} k={k.shape} v={v.shape}")
        self.scale = 1.0 / math.sqrt(q.shape[-1])
        scores = (q @ np.swapaxes(k, -1, -2)) * self.scale
        if mask is not None:
            scores = np.where(mask, _MASK_FILL, scores)
        self.p = _softmax(scores)
        self.q, self.k, self.v = q, k, v
        return self.p @ v

    def backward(self, grad):
        p, q, k, v = self.p, self.q, self.k, self.v
        grad_v = unbroadcast(np.swapaxes(p, -1, -2) @ grad, v.shape)
        grad_p = grad @ np.swapaxes(v, -1, -2)
        grad_s = p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True)) * self.scale
        grad_q = unbroadcast(grad_s @ k, q.shape)
        grad_k = unbroadcast(np.swapaxes(grad_s, -1, -2) @ q, k.shape)
        return grad_q, grad_k, grad_v


def scaled_dot_attention(q, k, v, mask=None):
    return ScaledDotAttention.apply(q, k, v, mask=mask)


class EmbeddingLookup(Function):
    op_kind = 'embedding_lookup'

    def forward(self, weight, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
            raise ContractViolation(f"embedding id out of range [0, {weight.shape[0]})")
        self.ids, self.shape = ids, weight.shape
        return weight[ids]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.ids.reshape(-1), grad.reshape(-1, self.shape[1]))
        return full, None


def embedding_lookup(weight, ids):
    return EmbeddingLookup.apply(weight, Tensor(np.asarray(ids), requires_grad=False, dtype=np.int64))


class CrossEntropy(Function):
    """Mean negative log-likelihood over targets that are not `ignore_index`."""

    op_kind = 'cross_entropy'

    def forward(self, logits, targets, ignore_index=None):
        if logits.ndim != 2:
            raise ContractViolation(f"cross_entropy expects (N, V) logits, got {logits.shape}")
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.shape[0] != logits.shape[0]:
            raise ContractViolation("cross_entropy target count does not match logits")
        valid = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
        self.count = max(int(valid.sum()), 1)
        safe = np.where(valid, targets, 0)
        if np.any(safe < 0) or np.any(safe >= logits.shape[1]):
            raise ContractViolation("cross_entropy target outside the vocabulary")
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        picked = logp[np.arange(len(safe)), safe]
        self.logp, self.safe, self.valid = logp, safe, valid
        return np.asarray(-(picked * valid).sum() / self.count, dtype=logits.dtype)

    def backward(self, grad):
        g = np.exp(self.logp)
        g[np.arange(len(self.safe)), self.safe] -= 1.0
        g *= self.valid[:, None] / self.count
        return g * grad, None


def cross_entropy(logits, targets, ignore_index=None):
    return CrossEntropy.apply(logits, Tensor(np.asarray(targets), requires_grad=False, dtype=np.int64),
                              ignore_index=ignore_index)


class MseMean(Function):
    op_kind = 'mse_mean'

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ContractViolation(f"mse_mean shape mismatch {a.shape} vs {b.shape}")
        self.diff = a - b
        return np.asarray(np.mean(self.diff ** 2), dtype=a.dtype)

    def backward(self, grad):
        g = grad * 2.0 * self.diff / self.diff.size
        return g, -g


def mse_mean(a, b):
    return MseMean.apply(a, b)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn, inputs, index, step=1e-4):
    """Central finite differences of scalar `fn(*inputs)` w.r.t. inputs[index]."""
    target = inputs[index]
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = fn(*inputs).item()
            flat[i] = original - step
            minus = fn(*inputs).item()
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(fn, inputs, step=1e-4, tolerance=1e-4):
    """Compare analytic and central-difference gradients for every input requiring grad.

    Inputs should be float64 tensors. Returns the worst relative error
    (norm-based, so isolated near-zero entries do not dominate).
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, inputs, i, step=step)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tolerance:
            logger.warning(f"gradcheck failed for input {i}: relative error {err:.3e}")
    return worst
