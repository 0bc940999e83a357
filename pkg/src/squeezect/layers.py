"""Layer objects wrapping the kernels in :mod:`squeezect.ops` with their parameters.

A layer is stateless between calls apart from its parameters and buffers:
``forward`` returns the output and a cache, ``backward`` consumes the cache,
accumulates parameter gradients and returns the input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops

DTYPE = np.float32


@dataclass
class Param:
    data: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)


def he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Layer:
    kind = "layer"
    n_inputs = 1

    def params(self) -> dict[str, Param]:
        return {}

    def forward(self, xs, training):
        raise NotImplementedError

    def backward(self, cache, dy):
        """Input gradients, one per input. ``need_dx = False`` allows skipping them."""
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"
    need_dx = True

    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Param(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Param(np.zeros(cout, dtype=DTYPE))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, xs, training):
        (x,) = xs
        y, cols = ops.conv2d_forward(x, self.weight.data, self.bias.data, self.stride, self.padding)
        return y, ((x.shape, cols) if training else None)

    def backward(self, cache, dy):
        x_shape, cols = cache
        dx, dw, db = ops.conv2d_backward(x_shape, self.weight.data, dy, cols, self.stride,
                                         self.padding, need_dx=self.need_dx)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return [dx]


class ConvTranspose2d(Layer):
    kind = "conv_transpose"

    def __init__(self, cin, cout, kernel, stride, padding=0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        # each output pixel sees cin * (kernel / stride)^2 inputs
        fan_in = max(1, cin * (kernel * kernel) // (stride * stride))
        self.weight = Param(he_normal(rng, (cin, cout, kernel, kernel), fan_in))
        self.bias = Param(np.zeros(cout, dtype=DTYPE))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, xs, training):
        (x,) = xs
        y = ops.conv_transpose2d_forward(x, self.weight.data, self.bias.data, self.stride, self.padding)
        return y, (x if training else None)

    def backward(self, cache, dy):
        dx, dw, db = ops.conv_transpose2d_backward(cache, self.weight.data, dy, self.stride, self.padding)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return [dx]


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.9):
        self.eps, self.momentum = eps, momentum
        self.gamma = Param(np.ones(channels, dtype=DTYPE))
        self.beta = Param(np.zeros(channels, dtype=DTYPE))
        self.running_mean = Param(np.zeros(channels, dtype=DTYPE), trainable=False)
        self.running_var = Param(np.ones(channels, dtype=DTYPE), trainable=False)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, xs, training):
        (x,) = xs
        y, cache = ops.batchnorm_forward(x, self.gamma.data, self.beta.data,
                                         self.running_mean.data, self.running_var.data,
                                         training, self.eps, self.momentum)
        return y.astype(x.dtype, copy=False), cache

    def backward(self, cache, dy):
        dx, dgamma, dbeta = ops.batchnorm_backward(dy, self.gamma.data, cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        return [dx]


class ELU(Layer):
    kind = "elu"

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def forward(self, xs, training):
        (x,) = xs
        y = ops.elu(x, self.alpha)
        return y, (y if training else None)

    def backward(self, cache, dy):
        return [ops.elu_backward(cache, dy, self.alpha)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, training):
        (x,) = xs
        y = ops.relu(x)
        return y, (x if training else None)

    def backward(self, cache, dy):
        return [ops.relu_backward(cache, dy)]


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, window, stride, padding=0):
        self.window, self.stride, self.padding = window, stride, padding

    def forward(self, xs, training):
        (x,) = xs
        y, arg = ops.maxpool2d_forward(x, self.window, self.stride, self.padding, with_argmax=training)
        return y, ((x.shape, arg) if training else None)

    def backward(self, cache, dy):
        x_shape, arg = cache
        return [ops.maxpool2d_backward(x_shape, dy, arg)]


class Concat(Layer):
    kind = "concat"
    n_inputs = None

    def forward(self, xs, training):
        return ops.concat_depth(list(xs)), [x.shape[1] for x in xs]

    def backward(self, cache, dy):
        return ops.concat_depth_backward(dy, cache)


class Add(Layer):
    kind = "add"
    n_inputs = 2

    def forward(self, xs, training):
        a, b = xs
        if a.shape != b.shape:
            raise ops.ShapeError(f"add: operand shapes differ, {a.shape} vs {b.shape}")
        return a + b, None

    def backward(self, cache, dy):
        return [dy, dy]


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, xs, training):
        (x,) = xs
        return ops.global_avg_pool(x), x.shape

    def backward(self, cache, dy):
        return [ops.global_avg_pool_backward(cache, dy)]


class Flatten(Layer):
    kind = "flatten"

    def forward(self, xs, training):
        (x,) = xs
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return [dy.reshape(cache)]


class Dense(Layer):
    kind = "dense"

    def __init__(self, din, dout, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(he_normal(rng, (dout, din), din))
        self.bias = Param(np.zeros(dout, dtype=DTYPE))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, xs, training):
        (x,) = xs
        return ops.dense_forward(x, self.weight.data, self.bias.data), (x if training else None)

    def backward(self, cache, dy):
        dx, dw, db = ops.dense_backward(cache, self.weight.data, dy)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return [dx]


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]
    meta: dict = field(default_factory=dict)
