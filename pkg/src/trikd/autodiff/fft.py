"""2-D discrete Fourier transform with gradients.

Convention: the forward transform is unnormalised and the inverse carries the
1/(H*W) factor, so ``sum |x|^2 == sum |X|^2 / (H*W)``.  Transforms act on the
last two axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, as_tensor, make_result


@dataclass
class ComplexTensor:
    """A complex array held as two real tensors so each part carries its own gradient."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real part {self.real.shape} and imaginary part {self.imag.shape} differ in shape")

    @property
    def shape(self) -> tuple:
        return self.real.shape

    def numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data

    def scale(self, mask) -> "ComplexTensor":
        """Multiply both parts by a real factor (broadcast over leading axes)."""
        return ComplexTensor(ops.mul(self.real, mask), ops.mul(self.imag, mask))

    def abs(self, eps: float = 1e-12) -> Tensor:
        """Smoothed magnitude sqrt(re^2 + im^2 + eps); differentiable everywhere."""
        return ops.sqrt(ops.add(ops.add(ops.square(self.real), ops.square(self.imag)), eps))


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _check_extents(H: int, W: int, pad: bool) -> None:
    if not pad and not (_is_pow2(H) and _is_pow2(W)):
        raise ValueError(f"fft2: extents ({H}, {W}) must be powers of two (pass pad=True to zero-pad)")


def fft2(x: Tensor, pad: bool = False) -> ComplexTensor:
    """Unnormalised 2-D DFT of a real tensor over its last two axes."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    _check_extents(H, W, pad)
    if pad and not (_is_pow2(H) and _is_pow2(W)):
        Hp, Wp = _next_pow2(H), _next_pow2(W)
        widths = [(0, 0)] * (x.ndim - 2) + [(0, Hp - H), (0, Wp - W)]
        x = make_result(np.pad(x.data, widths), (x,), lambda g: (g[..., :H, :W],), "pad")
        H, W = Hp, Wp
    spec = np.fft.fft2(x.data)
    packed = np.stack([spec.real, spec.imag])

    def bw(g):
        # adjoint of the real-input DFT: Re(conj(F) (g_re + i g_im)) = H*W * Re(ifft2(.))
        return ((H * W) * np.fft.ifft2(g[0] + 1j * g[1]).real,)

    both = make_result(packed, (x,), bw, "fft2")
    return ComplexTensor(ops.getitem(both, 0), ops.getitem(both, 1))


def ifft2(X: ComplexTensor) -> Tensor:
    """Real part of the inverse DFT (scaled by 1/(H*W))."""
    H, W = X.shape[-2:]
    _check_extents(H, W, pad=False)
    out = np.fft.ifft2(X.real.data + 1j * X.imag.data).real

    def bw(g):
        back = np.fft.ifft2(g)
        return back.real, -back.imag

    return make_result(np.ascontiguousarray(out, dtype=DTYPE), (X.real, X.imag), bw, "ifft2")


def fftshift(X):
    """Swap quadrants so the DC bin moves to (H/2, W/2).  Even extents only."""
    H, W = X.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"fftshift: extents ({H}, {W}) must be even")
    shift, axes = (H // 2, W // 2), (-2, -1)
    if isinstance(X, ComplexTensor):
        return ComplexTensor(ops.roll(X.real, shift, axes), ops.roll(X.imag, shift, axes))
    return ops.roll(as_tensor(X), shift, axes)
