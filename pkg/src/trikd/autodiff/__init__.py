from . import ops
from .fft import ComplexTensor, fft2, fftshift, ifft2
from .gradcheck import grad_check, numerical_grad
from .tensor import DTYPE, GraphError, Tensor, as_tensor, backward, grad_enabled, no_grad, topological_order

__all__ = [
    "ComplexTensor",
    "DTYPE",
    "GraphError",
    "Tensor",
    "as_tensor",
    "backward",
    "fft2",
    "fftshift",
    "grad_check",
    "grad_enabled",
    "ifft2",
    "no_grad",
    "numerical_grad",
    "ops",
    "topological_order",
]
