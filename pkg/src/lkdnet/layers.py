"""Layer framework: module base class plus the primitive trainable layers.

Reverse mode is hand-rolled with matched forward/backward pairs: each
layer caches what its backward needs during forward, backward consumes the
cache and returns the gradient wrt the layer input while accumulating
parameter gradients in place. There is no tape; composite modules call
their children's backwards in reverse order themselves.

A second forward overwrites the cache, so backward must be called (at most
once) before the next forward. Single-threaded by construction.
"""

from __future__ import annotations

import math

import numpy as np

from . import precision
from .convolution import ConvSpec, conv2d_backward, conv2d_forward
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Base class: child/parameter registry, mode flag, naming.

    Assigning a Parameter or Module attribute registers it under the
    attribute name; registration order is attribute-assignment order,
    which fixes both checkpoint layout and RNG consumption order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            self._params.pop(name, None)
            self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def buffers(self):
        """Non-trainable state saved in checkpoints; overridden by layers that have any."""
        return []

    def named_buffers(self, prefix: str = ""):
        for name, arr in self.buffers():
            yield (f"{prefix}{name}", arr)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self, prefix: str = ""):
        yield (prefix.rstrip("."), self)
        for name, child in self._children.items():
            yield from child.modules(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def finalize_names(self, prefix: str = ""):
        """Stamp hierarchical names onto parameters; names must be unique."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name
        return self

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Sequential(Module):
    """Chain of modules; backward replays the chain in reverse."""

    def __init__(self, items):
        super().__init__()
        self.items = list(items)
        for i, m in enumerate(self.items):
            self._children[str(i)] = m

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.items:
            x = m.forward(x)
        return x

    def backward(self, grad_out: Tensor) -> Tensor:
        for m in reversed(self.items):
            grad_out = m.backward(grad_out)
        return grad_out


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Centered uniform with fan-in scaling: U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(precision.dtype()))


class Conv2d(Module):
    """Trainable conv over a ConvSpec. Bias initializes to zero."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_ch // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(uniform_init(rng, spec.weight_shape, fan_in))
        self.bias = Parameter(Tensor.zeros((1, spec.out_ch, 1, 1))) if spec.has_bias else None
        self._x = None

    def forward(self, x: Tensor) -> Tensor:
        self._x = x
        return conv2d_forward(x, self.spec, self.weight.value, self.bias.value if self.bias else None)

    def backward(self, grad_out: Tensor) -> Tensor:
        gx, gw, gb = conv2d_backward(self._x, self.spec, self.weight.value, grad_out)
        self.weight.accumulate_grad(gw)
        if self.bias is not None:
            self.bias.accumulate_grad(gb)
        return gx


def pointwise(in_ch: int, out_ch: int, rng, has_bias: bool = True) -> Conv2d:
    return Conv2d(ConvSpec(in_ch, out_ch, 1, padding=(0, 0), has_bias=has_bias), rng)


def depthwise(ch: int, kernel: int, rng, dilation: int = 1, has_bias: bool = True) -> Conv2d:
    spec = ConvSpec(ch, ch, kernel, dilation=dilation, groups=ch, padding="same", has_bias=has_bias)
    return Conv2d(spec, rng)


class BatchNorm2d(Module):
    """Per-channel batch norm with running statistics.

    Train mode normalizes by biased batch moments over (N, H, W) and updates
    running stats as (1 - momentum) * running + momentum * batch. Eval mode
    normalizes by the running stats. Train mode requires N * H * W >= 2.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(Tensor.ones((1, ch, 1, 1)))
        self.beta = Parameter(Tensor.zeros((1, ch, 1, 1)))
        self.running_mean = np.zeros(ch, dtype=precision.dtype())
        self.running_var = np.ones(ch, dtype=precision.dtype())
        self._cache = None

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name: str, arr: np.ndarray):
        cur = getattr(self, name)
        if arr.size != cur.size:
            raise ShapeError(f"buffer {name} size {arr.size} does not match {cur.size}")
        object.__setattr__(self, name, arr.reshape(cur.shape).astype(cur.dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.ch:
            raise ShapeError(f"batchnorm over {self.ch} channels got input {x.shape}")
        xd = x.data
        if self.training:
            count = xd.shape[0] * xd.shape[2] * xd.shape[3]
            if count < 2:
                raise ValueError(f"batchnorm train mode needs N*H*W >= 2, got {count}")
            mean = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            m = xd.dtype.type(self.momentum)
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(xd.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(xd.dtype)
        else:
            mean = self.running_mean.astype(xd.dtype)
            var = self.running_var.astype(xd.dtype)
        inv_std = 1.0 / np.sqrt(var + xd.dtype.type(self.eps))
        xhat = (xd - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, self.training)
        out = self.gamma.value.data * xhat + self.beta.value.data
        return Tensor(out, dtype=xd.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        xhat, inv_std, was_training = self._cache
        god = grad_out.data
        if god.shape != xhat.shape:
            raise ShapeError(f"batchnorm grad shape {god.shape} does not match {xhat.shape}")
        ggamma = np.einsum("nchw->c", god * xhat, optimize=True).reshape(1, -1, 1, 1)
        gbeta = god.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        self.gamma.accumulate_grad(Tensor(ggamma, dtype=god.dtype))
        self.beta.accumulate_grad(Tensor(gbeta, dtype=god.dtype))
        gxhat = god * self.gamma.value.data
        if not was_training:
            gx = gxhat * inv_std.reshape(1, -1, 1, 1)
            return Tensor(gx, dtype=god.dtype)
        count = god.shape[0] * god.shape[2] * god.shape[3]
        sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (gxhat - (sum_g + xhat * sum_gx) / count) * inv_std.reshape(1, -1, 1, 1)
        return Tensor(gx, dtype=god.dtype)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: Tensor) -> Tensor:
        self._mask = x.data > 0
        return Tensor(np.where(self._mask, x.data, x.data.dtype.type(0)), dtype=x.data.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        return Tensor(np.where(self._mask, grad_out.data, grad_out.data.dtype.type(0)), dtype=grad_out.data.dtype)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    dt = x.dtype.type
    inner = dt(_GELU_C) * (x + dt(_GELU_A) * x * x * x)
    return dt(0.5) * x * (1 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    dt = x.dtype.type
    x3 = x * x * x
    inner = dt(_GELU_C) * (x + dt(_GELU_A) * x3)
    t = np.tanh(inner)
    dinner = dt(_GELU_C) * (1 + dt(3 * _GELU_A) * x * x)
    return dt(0.5) * (1 + t) + dt(0.5) * x * (1 - t * t) * dinner


class GELU(Module):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x: Tensor) -> Tensor:
        self._x = x.data
        return Tensor(gelu(x.data), dtype=x.data.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        return Tensor(grad_out.data * gelu_grad(self._x), dtype=grad_out.data.dtype)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Module):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x: Tensor) -> Tensor:
        self._y = sigmoid(x.data)
        return Tensor(self._y, dtype=x.data.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        return Tensor(grad_out.data * self._y * (1 - self._y), dtype=grad_out.data.dtype)


class Linear(Module):
    """Dense layer on [N, C, 1, 1] vectors; weight stored [out, in, 1, 1]."""

    def __init__(self, in_features: int, out_features: int, rng, has_bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_init(rng, (out_features, in_features, 1, 1), in_features))
        self.bias = Parameter(Tensor.zeros((1, out_features, 1, 1))) if has_bias else None
        self._x = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_features or x.shape[2] != 1 or x.shape[3] != 1:
            raise ShapeError(f"linear expects [N, {self.in_features}, 1, 1], got {x.shape}")
        self._x = x.data
        x2 = x.data.reshape(x.shape[0], self.in_features)
        w2 = self.weight.value.data.reshape(self.out_features, self.in_features)
        y = x2 @ w2.T
        if self.bias is not None:
            y = y + self.bias.value.data.reshape(1, self.out_features)
        return Tensor(y.reshape(x.shape[0], self.out_features, 1, 1), dtype=x.data.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        n = self._x.shape[0]
        g2 = grad_out.data.reshape(n, self.out_features)
        x2 = self._x.reshape(n, self.in_features)
        w2 = self.weight.value.data.reshape(self.out_features, self.in_features)
        gw = (g2.T @ x2).reshape(self.weight.shape)
        self.weight.accumulate_grad(Tensor(gw, dtype=g2.dtype))
        if self.bias is not None:
            gb = g2.sum(axis=0).reshape(self.bias.shape)
            self.bias.accumulate_grad(Tensor(gb, dtype=g2.dtype))
        gx = (g2 @ w2).reshape(n, self.in_features, 1, 1)
        return Tensor(gx, dtype=g2.dtype)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r^2, H, W] -> [N, C, H*r, W*r]; exact inverse of pixel_unshuffle."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    c2 = c // (r * r)
    out = x.data.reshape(n, c2, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c2, h * r, w * r)
    return Tensor(out, dtype=x.data.dtype)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """[N, C, H*r, W*r] -> [N, C*r^2, H, W]."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle needs spatial sizes divisible by {r}, got {(h, w)}")
    out = (
        x.data.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )
    return Tensor(out, dtype=x.data.dtype)


class PixelShuffle(Module):
    def __init__(self, r: int):
        super().__init__()
        self.r = r

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(x, self.r)

    def backward(self, grad_out: Tensor) -> Tensor:
        return pixel_unshuffle(grad_out, self.r)


class Scale(Module):
    """Learnable per-channel multiplier (the residual-branch scale)."""

    def __init__(self, ch: int, init: float = 1e-2):
        super().__init__()
        self.s = Parameter(Tensor.full((1, ch, 1, 1), init))
        self._x = None

    def forward(self, x: Tensor) -> Tensor:
        self._x = x.data
        return Tensor(x.data * self.s.value.data, dtype=x.data.dtype)

    def backward(self, grad_out: Tensor) -> Tensor:
        gs = (grad_out.data * self._x).sum(axis=(0, 2, 3), keepdims=True)
        self.s.accumulate_grad(Tensor(gs, dtype=grad_out.data.dtype))
        return Tensor(grad_out.data * self.s.value.data, dtype=grad_out.data.dtype)
