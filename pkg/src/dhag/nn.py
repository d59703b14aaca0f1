"""Layers, initialisation schemes and the Adam optimiser."""

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import DimensionError, StateError


def init_params(shape, rng, scheme="xavier"):
    """Draw a parameter tensor.

    ``scheme`` is ``"kaiming"`` (uniform, for weights feeding a relu),
    ``"xavier"`` (uniform) or ``"zeros"``. For weights the fan-in is the
    product of all dimensions but the first, the fan-out the product of all
    but the second.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return Tensor(np.zeros(shape), requires_grad=True)
    if len(shape) < 2:
        raise DimensionError(f"{scheme} init needs a weight of rank >= 2, got {shape}")
    receptive = math.prod(shape[2:])
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    if scheme == "kaiming":
        bound = math.sqrt(6.0 / fan_in)
    elif scheme == "xavier":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def target_variance(shape, scheme):
    receptive = math.prod(shape[2:])
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    if scheme == "kaiming":
        return 2.0 / fan_in
    return 2.0 / (fan_in + fan_out)


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, x):
        return self.forward(x)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, scheme="xavier"):
        self.weight = init_params((out_features, in_features), rng, scheme)
        self.bias = init_params((out_features,), rng, "zeros")

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"linear layer expects (m, {self.in_features}) input, got {x.shape}"
            )
        return ag.add(ag.matmul(x, ag.transpose(self.weight)), self.bias)


def linear_forward(layer, x):
    return layer.forward(x)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, width, rng, stride=1, padding=0, scheme="xavier"):
        self.kernels = init_params((out_channels, in_channels, width), rng, scheme)
        self.bias = init_params((out_channels,), rng, "zeros")
        self.stride = int(stride)
        self.padding = int(padding)

    def output_length(self, input_len):
        width = self.kernels.shape[2]
        return (input_len + 2 * self.padding - width) // self.stride + 1

    def forward(self, x):
        return ag.conv1d(x, self.kernels, self.bias, self.stride, self.padding)


def conv1d_forward(layer, x):
    return layer.forward(x)


class MLP(Module):
    """Stack of linear layers with relu between them.

    ``output`` selects the activation after the last layer: ``None`` or
    ``"sigmoid"``.
    """

    def __init__(self, sizes, rng, output=None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, "kaiming" if i < n - 1 else "xavier")
            for i in range(n)
        ]
        self.output = output

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = ag.relu(layer(x))
        x = self.layers[-1](x)
        if self.output == "sigmoid":
            x = ag.sigmoid(x)
        return x


class Adam:
    """Adam with bias correction over a fixed list of parameters.

    ``step`` consumes the parameters' ``grad`` slots and clears them.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise StateError(f"{len(missing)} parameter(s) have no gradient; call backward first")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / c1
            v_hat = v / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(state, params=None, grads=None):
    """Functional form: optionally install ``grads`` on ``params`` then step ``state``."""
    if grads is not None:
        params = state.params if params is None else params
        for p, g in zip(params, grads):
            p.grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step()
    return state.params
