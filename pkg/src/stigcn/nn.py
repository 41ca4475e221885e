"""Stateful layers with hand-written adjoints.

A layer caches what it needs during ``forward`` and consumes it in
``backward``, which returns the input gradient and accumulates parameter
gradients into ``Param.grad``. Gradient accumulation is additive and is
only safe under a single writer.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops

__all__ = [
    "Param", "Module", "BackwardError", "PointwiseConv", "TemporalConv",
    "BatchNorm", "ReLU", "ConvBNReLU", "MaxPoolTime", "GlobalAvgPool",
    "Dropout", "Linear", "ModuleList", "Shape",
]

Shape = tuple


class BackwardError(RuntimeError):
    pass


class Param:
    """A learnable tensor and its gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name=""):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Module:
    """Base class: registers ``Param`` and ``Module`` attributes in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_cache", None)

    def __setattr__(self, key, value):
        if isinstance(value, Param):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name, value):
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Param]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for k in self._buffers:
            yield prefix + k, getattr(self, k)
        for k, m in self._children.items():
            yield from m.named_buffers(f"{prefix}{k}.")

    def modules(self):
        yield self
        for m in self._children.values():
            yield from m.modules()

    def set_buffer(self, dotted, value):
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            object.__setattr__(self, head, value)

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _pop_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called before forward")
        cache = self._cache
        self._cache = None
        return cache

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def flops(self, shape: Shape):
        """Analytic cost for an input of ``shape``: ``(out_shape, macs, aux_ops)``."""
        return shape, 0, 0


def _init_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class PointwiseConv(Module):
    def __init__(self, c_in, c_out, rng, dtype=np.float32, bias=True):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = Param(_init_uniform(rng, (c_out, c_in), c_in, dtype))
        if bias:
            self.bias = Param(np.zeros(c_out, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x):
        self._cache = x
        return ops.pointwise_conv(x, self.weight.value, None if self.bias is None else self.bias.value)

    def backward(self, dy):
        x = self._pop_cache()
        dx, dw, db = ops.pointwise_conv_backward(dy, x, self.weight.value)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx

    def flops(self, shape):
        n, c, t, v = shape
        return (n, self.c_out, t, v), n * t * v * self.c_in * self.c_out, 0


class TemporalConv(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, dtype=np.float32):
        super().__init__()
        ops._check_kernel(kernel)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.weight = Param(_init_uniform(rng, (c_out, c_in, kernel), c_in * kernel, dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        self._cache = x
        return ops.temporal_conv(x, self.weight.value, self.bias.value)

    def backward(self, dy):
        x = self._pop_cache()
        dx, dw, db = ops.temporal_conv_backward(dy, x, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def flops(self, shape):
        n, c, t, v = shape
        return (n, self.c_out, t, v), n * t * v * self.c_in * self.c_out * self.kernel, 0


class BatchNorm(Module):
    """Batch normalization over ``feature_axes``.

    Train mode normalizes with biased batch variance and stores the unbiased
    estimate in ``running_var``. Eval mode refuses to run until running
    statistics exist (from a train step or from loading).
    """

    def __init__(self, num_features, feature_axes=(1,), eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.feature_axes = tuple(feature_axes)
        self.eps, self.momentum = eps, momentum
        self.gamma = Param(np.ones(num_features, dtype=dtype))
        self.beta = Param(np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))
        self.has_stats = False

    def _feature_size(self, x):
        return int(np.prod([x.shape[a] for a in self.feature_axes]))

    def forward(self, x):
        if self._feature_size(x) != self.num_features:
            raise ops.ShapeError(f"batch norm over {self.num_features} features got "
                                 f"{self._feature_size(x)} (input shape {x.shape})")
        g, b = self.gamma.value, self.beta.value
        if self.training:
            y, cache, mean, var = ops.batch_norm_train(x, g, b, self.feature_axes, self.eps)
            count = x.size // self.num_features
            unbiased = var * (count / max(count - 1, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            self.has_stats = True
        else:
            if not self.has_stats:
                raise RuntimeError("batch norm in eval mode has no running statistics; "
                                   "train first, load weights, or call init_running_stats()")
            y, cache = ops.batch_norm_eval(x, g, b, self.running_mean, self.running_var,
                                           self.feature_axes, self.eps)
        self._cache = cache
        return y

    def backward(self, dy):
        dx, dg, db = ops.batch_norm_backward(dy, self._pop_cache())
        self.gamma.grad += dg
        self.beta.grad += db
        return dx

    def set_buffer(self, dotted, value):
        super().set_buffer(dotted, value)
        self.has_stats = True

    def flops(self, shape):
        return shape, 0, 2 * int(np.prod(shape))


class ReLU(Module):
    def forward(self, x):
        self._cache = x
        return ops.relu(x)

    def backward(self, dy):
        return ops.relu_backward(dy, self._pop_cache())

    def flops(self, shape):
        return shape, 0, int(np.prod(shape))


class ConvBNReLU(Module):
    """Convolution followed by batch norm and (optionally) ReLU."""

    def __init__(self, c_in, c_out, rng, kernel=1, relu=True, dtype=np.float32):
        super().__init__()
        if kernel == 1:
            self.conv = PointwiseConv(c_in, c_out, rng, dtype)
        else:
            self.conv = TemporalConv(c_in, c_out, rng, kernel, dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)
        self.relu = ReLU() if relu else None

    def forward(self, x):
        y = self.bn(self.conv(x))
        return self.relu(y) if self.relu is not None else y

    def backward(self, dy):
        if self.relu is not None:
            dy = self.relu.backward(dy)
        return self.conv.backward(self.bn.backward(dy))

    def flops(self, shape):
        out, mac, aux = self.conv.flops(shape)
        _, _, a2 = self.bn.flops(out)
        aux += a2
        if self.relu is not None:
            aux += self.relu.flops(out)[2]
        return out, mac, aux


class MaxPoolTime(Module):
    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def forward(self, x):
        y, idx = ops.max_pool_time(x, self.window, self.window)
        self._cache = (idx, x.shape[2])
        return y

    def backward(self, dy):
        idx, t = self._pop_cache()
        return ops.max_pool_time_backward(dy, idx, t, self.window)

    def flops(self, shape):
        n, c, t, v = shape
        out = (n, c, t // self.window, v)
        return out, 0, int(np.prod(out)) * (self.window - 1)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._cache = x.shape
        return ops.global_avg_pool(x)

    def backward(self, dy):
        return ops.global_avg_pool_backward(dy, self._pop_cache())

    def flops(self, shape):
        n, c, t, v = shape
        return (n, c), 0, n * c * t * v


class Dropout(Module):
    """Inverted dropout; identity in eval mode or with ``rate == 0``."""

    def __init__(self, rate, rng):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        if not self.training or self.rate == 0:
            self._cache = 1.0
            return x
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._pop_cache()


class Linear(Module):
    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.weight = Param(_init_uniform(rng, (c_out, c_in), c_in, dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        x = self._pop_cache()
        self.weight.grad += dy.T @ x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value

    def flops(self, shape):
        return (shape[0], self.c_out), shape[0] * self.c_in * self.c_out, 0


class ModuleList(Module):
    """Indexable container; children are named ``0``, ``1``, ..."""

    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._children)), m)

    def __getitem__(self, i):
        return list(self._children.values())[i]

    def __len__(self):
        return len(self._children)

    def __iter__(self):
        return iter(list(self._children.values()))
