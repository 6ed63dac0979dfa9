"""Dense layers with hand-written forward/backward passes.

Every layer works on numpy arrays in the dtype of its parameters (float32 by
default, float64 when built inside :func:`float64_mode`).  ``forward`` is pure;
pass a ``ctx`` dict to keep intermediates that ``backward`` can reuse.
``backward(x, dout, ctx)`` returns the input gradient and *accumulates* into
``Param.grad``.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError

_DEFAULT_DTYPE = [np.float32]


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def float64_mode():
    """Build layers in float64; only meant for gradient verification."""
    _DEFAULT_DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Param:
    """A learnable tensor with its gradient and ADAM moments."""

    def __init__(self, value, name=""):
        value = np.ascontiguousarray(value)
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)
        self.step_count = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    dtype = dtype or default_dtype()
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _check_shape(expected, actual, what):
    if tuple(expected) != tuple(actual):
        raise ContractError(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")


class Layer:
    params: tuple = ()

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, ctx=None):
        raise NotImplementedError

    def backward(self, x, dout, ctx=None):
        raise NotImplementedError

    def named_params(self, prefix=""):
        return {f"{prefix}{attr}": p for attr, p in zip(self._param_attrs, self.params)}

    def astype(self, dtype):
        """Copy of this layer with parameters cast to ``dtype``."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = tuple(Param(p.value.astype(dtype), p.name) for p in self.params)
        for attr, p in zip(self._param_attrs, clone.params):
            setattr(clone, attr, p)
        return clone

    _param_attrs: tuple = ()


class Conv3x3(Layer):
    """3x3 convolution with zero padding 1 over (N, C, H, W) input."""

    _param_attrs = ("weight", "bias")

    def __init__(self, in_channels, out_channels, stride=1, rng=None, name="conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = Param(
            glorot_uniform(rng, (out_channels, in_channels, 3, 3),
                           in_channels * 9, out_channels * 9), "weight")
        self.bias = Param(np.zeros(out_channels, dtype=self.weight.value.dtype), "bias")
        self.params = (self.weight, self.bias)

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        s = self.stride
        return (n, self.out_channels, (h - 1) // s + 1, (w - 1) // s + 1)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"conv3x3 input: expected shape (N, {self.in_channels}, H, W), got {x.shape}")

    def _columns(self, x):
        s = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        # rows: (n, ho, wo); cols: (c, ky, kx)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9), (n, ho, wo)

    def forward(self, x, ctx=None):
        self._check(x)
        cols, (n, ho, wo) = self._columns(x)
        w = self.weight.value.reshape(self.out_channels, -1)
        out = cols @ w.T + self.bias.value
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        if ctx is not None:
            ctx["cols"] = cols
        return np.ascontiguousarray(out)

    def backward(self, x, dout, ctx=None):
        self._check(x)
        _check_shape(self.output_shape(x.shape), dout.shape, "conv3x3 upstream")
        cols = ctx.get("cols") if ctx else None
        if cols is None:
            cols, _ = self._columns(x)
        n, c, h, w = x.shape
        s = self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        d = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.weight.grad += (d.T @ cols).reshape(self.weight.value.shape)
        self.bias.grad += d.sum(axis=0)
        dcols = (d @ self.weight.value.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2), dtype=dout.dtype)
        for ky in range(3):
            for kx in range(3):
                dxp[:, :, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class Dense(Layer):
    """Fully-connected layer: (N, in) -> (N, out)."""

    _param_attrs = ("weight", "bias")

    def __init__(self, in_features, out_features, rng=None, name="fc"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(glorot_uniform(rng, (in_features, out_features),
                                           in_features, out_features), "weight")
        self.bias = Param(np.zeros(out_features, dtype=self.weight.value.dtype), "bias")
        self.params = (self.weight, self.bias)

    def output_shape(self, input_shape):
        return (input_shape[0], self.out_features)

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ContractError(
                f"fully-connected input: expected shape (N, {self.in_features}), got {x.shape}")

    def forward(self, x, ctx=None):
        self._check(x)
        return x @ self.weight.value + self.bias.value

    def backward(self, x, dout, ctx=None):
        self._check(x)
        _check_shape((x.shape[0], self.out_features), dout.shape, "fully-connected upstream")
        self.weight.grad += x.T @ dout
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value.T


class ReLU(Layer):
    def forward(self, x, ctx=None):
        return np.maximum(x, 0)

    def backward(self, x, dout, ctx=None):
        _check_shape(x.shape, dout.shape, "relu upstream")
        return dout * (x > 0)


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; first maximum in raster order wins ties."""

    def output_shape(self, input_shape):
        n, c, h, w = input_shape
        return (n, c, h // 2, w // 2)

    def _check(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(f"maxpool2x2 input: expected (N, C, even H, even W), got {x.shape}")

    def _blocks(self, x):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // 2, w // 2, 4)

    def forward(self, x, ctx=None):
        self._check(x)
        blocks = self._blocks(x)
        if ctx is not None:
            ctx["argmax"] = blocks.argmax(axis=-1)
        return blocks.max(axis=-1)

    def backward(self, x, dout, ctx=None):
        self._check(x)
        _check_shape(self.output_shape(x.shape), dout.shape, "maxpool2x2 upstream")
        arg = ctx.get("argmax") if ctx else None
        if arg is None:
            arg = self._blocks(x).argmax(axis=-1)
        n, c, h, w = x.shape
        dblocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
        return dblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h, w)


class Softmax(Layer):
    """Softmax along the last axis."""

    def forward(self, x, ctx=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, x, dout, ctx=None):
        _check_shape(x.shape, dout.shape, "softmax upstream")
        s = self.forward(x)
        return s * (dout - (dout * s).sum(axis=-1, keepdims=True))


class Sequential(Layer):
    """Fixed chain of layers; ``forward`` with a ctx records every input."""

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = list(names) if names else [f"l{i}" for i in range(len(self.layers))]
        self.params = tuple(p for layer in self.layers for p in layer.params)

    def output_shape(self, input_shape):
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
        return input_shape

    def named_params(self, prefix=""):
        out = {}
        for name, layer in zip(self.names, self.layers):
            out.update(layer.named_params(f"{prefix}{name}."))
        return out

    def forward(self, x, ctx=None):
        if ctx is not None:
            ctx["inputs"] = []
            ctx["sub"] = []
        for layer in self.layers:
            sub = {} if ctx is not None else None
            if ctx is not None:
                ctx["inputs"].append(x)
                ctx["sub"].append(sub)
            x = layer.forward(x, sub)
        return x

    def backward(self, x, dout, ctx=None):
        if ctx is None or "inputs" not in ctx:
            ctx = {}
            self.forward(x, ctx)
        for layer, inp, sub in zip(reversed(self.layers), reversed(ctx["inputs"]),
                                   reversed(ctx["sub"])):
            dout = layer.backward(inp, dout, sub)
        return dout

    def astype(self, dtype):
        return Sequential([layer.astype(dtype) for layer in self.layers], self.names)


def mlp(sizes, rng, names=None):
    """Dense/ReLU stack; no activation after the last layer."""
    layers, layer_names = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, rng))
        layer_names.append(names[i] if names else f"fc{i + 1}")
        if i < len(sizes) - 2:
            layers.append(ReLU())
            layer_names.append(f"relu{i + 1}")
    return Sequential(layers, layer_names)
