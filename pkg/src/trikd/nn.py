"""Parameter containers and the small layer set the encoders and decoders share.

A module built with ``rng=None`` is a *shape-only* module: its parameters are
`ParamSpec` placeholders carrying a shape and no storage.  That is how the
full-scale preset is dry-run without allocating its weights.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, ops


class Parameter(Tensor):
    """Trainable leaf tensor that counts reads of its storage."""

    __slots__ = ("_value", "reads")

    def __init__(self, data, name: Optional[str] = None):
        self.reads = 0
        super().__init__(data, requires_grad=True, name=name)

    @property
    def data(self):
        self.reads += 1
        return self._value

    @data.setter
    def data(self, value):
        self._value = value

    @property
    def value(self) -> np.ndarray:
        """Storage access that does not count as a read."""
        return self._value


class ParamSpec:
    __slots__ = ("shape",)

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def uniform_param(shape, fan_in: int, rng: Optional[np.random.Generator], gain: float = 2.0):
    """He-style centred uniform init, bound sqrt(3 * gain / fan_in)."""
    if rng is None:
        return ParamSpec(shape)
    bound = np.sqrt(3.0 * gain / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


def const_param(shape, value: float, rng):
    if rng is None:
        return ParamSpec(shape)
    return Parameter(np.full(shape, value, dtype=np.float64))


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: dict = {}
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Parameter, ParamSpec, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            else:
                yield name, val

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key, buf in self._buffers.items():
            yield f"{prefix}{key}", buf
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")

    def named_state(self) -> list:
        """Parameters then buffers, as (name, shape, array-or-None) in a fixed order."""
        out = []
        for name, p in self.named_parameters():
            out.append((name, p.shape, p.value if isinstance(p, Parameter) else None))
        for name, b in self.named_buffers():
            out.append((name, b.shape, b if isinstance(b, np.ndarray) else None))
        return out

    def num_parameters(self) -> int:
        return int(sum(np.prod(p.shape) for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, val in self._children():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            if isinstance(p, Parameter):
                p.grad = None

    def reset_access_counters(self) -> None:
        for p in self.parameters():
            if isinstance(p, Parameter):
                p.reads = 0

    def access_count(self) -> int:
        return sum(p.reads for p in self.parameters() if isinstance(p, Parameter))


def _buffer(shape, value, rng):
    if rng is None:
        return ParamSpec(shape)
    return np.full(shape, value, dtype=np.float64)


class Conv2d(Module):
    def __init__(self, cin, cout, k=1, stride=1, padding=None, bias=True, rng=None, zero_init=False, gain=2.0):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        self.weight = const_param(shape, 0.0, rng) if zero_init else uniform_param(shape, cin * k * k, rng, gain)
        self.bias = const_param((cout,), 0.0, rng) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c, rng=None, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = const_param((c,), 1.0, rng)
        self.bias = const_param((c,), 0.0, rng)
        self._buffers["running_mean"] = _buffer((c,), 0.0, rng)
        self._buffers["running_var"] = _buffer((c,), 1.0, rng)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ops.batch_norm(
            x, self.weight, self.bias,
            self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class LayerNorm(Module):
    def __init__(self, c, rng=None, eps=1e-5):
        super().__init__()
        self.weight = const_param((c,), 1.0, rng)
        self.bias = const_param((c,), 0.0, rng)
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    def __init__(self, cin, cout, bias=True, rng=None, gain=1.0):
        super().__init__()
        self.weight = uniform_param((cin, cout), cin, rng, gain)
        self.bias = const_param((cout,), 0.0, rng) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k=3, stride=1, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout, rng)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ResidualBlock(Module):
    """Two 3x3 conv/BN layers with an identity shortcut."""

    def __init__(self, c, rng=None):
        super().__init__()
        self.conv1 = Conv2d(c, c, 3, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(c, rng)
        self.conv2 = Conv2d(c, c, 3, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(c, rng)

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return ops.relu(ops.add(h, x))


class MultiHeadSelfAttention(Module):
    def __init__(self, c, heads, rng=None):
        super().__init__()
        if c % heads:
            raise ValueError(f"{heads} heads do not divide channel width {c}")
        self.heads = heads
        self.wq = uniform_param((c, c), c, rng, 1.0)
        self.wk = uniform_param((c, c), c, rng, 1.0)
        self.wv = uniform_param((c, c), c, rng, 1.0)
        self.wo = uniform_param((c, c), c, rng, 1.0)
        self.bo = const_param((c,), 0.0, rng)

    def forward(self, x):
        out, attn = ops.mhsa(x, self.wq, self.wk, self.wv, self.wo, self.heads)
        return ops.add(out, self.bo), attn


class TransformerBlock(Module):
    """Pre-norm block: x + MSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, c, heads, mlp_ratio=4, rng=None):
        super().__init__()
        self.ln1 = LayerNorm(c, rng)
        self.attn = MultiHeadSelfAttention(c, heads, rng)
        self.ln2 = LayerNorm(c, rng)
        self.fc1 = Linear(c, c * mlp_ratio, rng=rng, gain=2.0)
        self.fc2 = Linear(c * mlp_ratio, c, rng=rng)

    def forward(self, x):
        a, attn = self.attn(self.ln1(x))
        x = ops.add(x, a)
        h = self.fc2(ops.relu(self.fc1(self.ln2(x))))
        return ops.add(x, h), attn

    def zero_residual_branches(self) -> None:
        """Zero the output projections so the block is the identity map."""
        for p in (self.attn.wo, self.attn.bo, self.fc2.weight, self.fc2.bias):
            p.data = np.zeros_like(p.value)


def tokens_to_map(t: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) tokens -> (B, C, h, w) feature map."""
    B, N, C = t.shape
    if N != h * w:
        raise ValueError(f"token count {N} does not match a {h}x{w} grid")
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (B, C, h, w))


def map_to_tokens(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))
