"""Parameterised building blocks on top of the autodiff engine."""
import hashlib
import logging
import math

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import ContractViolation

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data, requires_grad=True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Container that discovers parameters, buffers and sub-modules from its attributes."""

    def __init__(self):
        self.training = True
        self._buffers = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith('_'):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=''):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(prefix=f"{full}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def register_buffer(self, name, value):
        self._buffers[name] = np.asarray(value, dtype=ad.default_dtype())

    def named_buffers(self, prefix=''):
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, value in self.named_buffers():
            state[f"buffer:{name}"] = value.copy()
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        missing = [name for name in params if name not in state]
        if strict and missing:
            raise ContractViolation(f"state is missing parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                value = np.asarray(state[name])
                if value.shape != p.shape:
                    raise ContractViolation(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
                p.data = value.astype(p.data.dtype, copy=True)
        for module_prefix, module in self._named_modules():
            for key in module._buffers:
                full = f"buffer:{module_prefix}{key}"
                if full in state:
                    module._buffers[key] = np.asarray(state[full], dtype=module._buffers[key].dtype).copy()
        return self

    def _named_modules(self, prefix=''):
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._named_modules(prefix=f"{prefix}{name}.")

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = ad.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        super().__init__()
        kh, kw = ad._pair(kernel_size)
        bound = 1.0 / math.sqrt(in_channels * kh * kw)
        self.weight = Parameter(_uniform(rng, bound, (out_channels, in_channels, kh, kw)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = ad._pair(stride)
        self.padding = ad._pair(padding)

    def forward(self, x):
        out = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * kernel_size)
        self.weight = Parameter(_uniform(rng, bound, (out_channels, in_channels, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        out = ad.conv1d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1)
        return out


class BatchNorm2d(Module):
    """Batch statistics in training mode, running statistics (momentum 0.1) in evaluation mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer('running_mean', np.zeros(channels))
        self.register_buffer('running_var', np.ones(channels))

    def forward(self, x):
        if not self.training:
            return ad.batch_norm_2d(x, self.gamma, self.beta, self._buffers['running_mean'],
                                    self._buffers['running_var'], eps=self.eps)
        data = x.data
        n = data.size // data.shape[1]
        mean = data.mean(axis=(0, 2, 3))
        var = data.var(axis=(0, 2, 3)) * (n / max(n - 1, 1))
        m = self.momentum
        self._buffers['running_mean'] = ((1 - m) * self._buffers['running_mean'] + m * mean).astype(self._buffers['running_mean'].dtype)
        self._buffers['running_var'] = ((1 - m) * self._buffers['running_var'] + m * var).astype(self._buffers['running_var'].dtype)
        return ad.batch_norm_2d(x, self.gamma, self.beta, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        out = ad.group_norm(x, self.groups, eps=self.eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        return out * self.gamma.reshape(shape) + self.beta.reshape(shape)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return ad.layer_norm(x, eps=self.eps) * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, num_embeddings, dim, rng, scale=0.02):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, scale, size=(num_embeddings, dim)))

    def forward(self, ids):
        return ad.embedding_lookup(self.weight, ids)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ContractViolation(f"model width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x):
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        out = ad.scaled_dot_attention(q, k, v, mask=mask)
        batch, _, length, _ = out.shape
        out = out.transpose(0, 2, 1, 3).reshape(batch, length, self.heads * self.head_dim)
        return self.out_proj(out)


class FeedForward(Module):
    def __init__(self, dim, rng, expansion=4):
        super().__init__()
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerEncoderBlock(Module):
    """Pre-norm self-attention block with a 4x GELU feed-forward."""

    def __init__(self, dim, heads, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


class TransformerDecoderBlock(Module):
    """Pre-norm causal self-attention, cross-attention and feed-forward."""

    def __init__(self, dim, heads, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        x = x + self.self_attn(self.norm1(x), mask=self_mask)
        x = x + self.cross_attn(self.norm2(x), context=memory, mask=memory_mask)
        return x + self.ff(self.norm3(x))


def causal_mask(length):
    """Boolean (length, length) mask; True above the diagonal (future positions)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def sinusoidal_positions(length, dim):
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: dim // 2])
    return table.astype(ad.default_dtype())


def parameter_checksum(module):
    """Order-sensitive digest of every parameter value, used by the freeze contracts."""
    digest = hashlib.sha256()
    for name, p in module.named_parameters():
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()
